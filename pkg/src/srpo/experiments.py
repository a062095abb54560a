"""Config-driven runs, sweeps and run manifests.

A run is described by a YAML file validated against ``ExperimentConfig``
(unknown keys are rejected). Every run writes its resolved config, its
artifacts and a ``manifest.json`` into the output directory. Randomness fans
out from one master seed through :func:`derive_seed`, so changing one stage
never shifts the random stream of another.
"""

import copy
import csv
import datetime as _dt
import hashlib
import itertools
import json
import logging
import math
import os
import subprocess
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .behavior import (BehaviorNet, BehaviorTrainConfig, density_grid, log_density,
                       train_behavior)
from .critic import CriticPair, train_critic
from .datasets import BANDIT_NAMES, generate_chain_mdp, load_dataset, make_bandit
from .errors import ConfigError, DependencyError
from .extraction import (SrpoConfig, ensemble_gain, extract_bandit, forward_kl_baseline,
                         gaussian_reverse_kl_baseline, ActionTable, target_grid)
from .critic import QuadraticQ
from .schedule import VPSchedule

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "SRPO_OUT"
KINDS = ("train_behavior", "train_critic", "extract", "density_map", "figure2", "figure3",
         "figure5_ensemble", "ablation_omega", "ablation_baseline", "ablation_beta")


def derive_seed(master, component):
    """Independent 32-bit seed for ``component`` from the run's master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Strict):
    name: str = "8gaussians"
    n: int = Field(1_000_000, ge=1)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _known(self):
        if self.path is None and self.name not in (*BANDIT_NAMES, "gaussian", "2modes", "chain"):
            raise ValueError(f"unknown dataset name {self.name!r}")
        return self


class ChainSpec(_Strict):
    n_states: int = Field(2, ge=2)
    rewards: list = [[0.0, 1.0], [0.0]]
    behavior_mix: Optional[list] = None
    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    n_per_state: int = Field(64, ge=1)


class BehaviorSpec(_Strict):
    checkpoint: Optional[str] = None
    width: int = Field(64, ge=1)
    n_blocks: int = Field(4, ge=0)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    num_frequencies: int = Field(16, ge=1)
    frequency_scale: float = Field(4.0, gt=0.0)
    steps: int = Field(50_000, ge=1)
    batch_size: int = Field(1024, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    ema_decay: float = Field(0.999, ge=0.0, lt=1.0)
    t_sampling: Literal["uniform", "low_biased"] = "low_biased"
    dtype: Literal["float32", "float64"] = "float32"
    linear_skip: bool = True
    ckpt_interval: int = Field(0, ge=0)


class CriticSpec(_Strict):
    checkpoint: Optional[str] = None
    hidden: list = [256, 256]
    tau: float = Field(0.7, gt=0.0, lt=1.0)
    rho: float = Field(0.005, gt=0.0, le=1.0)
    lr: float = Field(3e-4, gt=0.0)
    steps: int = Field(20_000, ge=1)
    batch_size: int = Field(256, ge=1)


class SrpoSpec(_Strict):
    beta: float = Field(1.0, gt=0.0)
    beta_mode: Literal["fixed", "grad_normalized"] = "fixed"
    omega_mode: Literal["dirac_t0", "sigma_sq"] = "sigma_sq"
    dirac_t0: float = 0.02
    use_baseline: bool = True
    t_range: tuple[float, float] = (0.02, 0.98)
    mc_samples: int = Field(16, ge=1)
    steps: int = Field(2000, ge=0)
    batch: int = Field(256, ge=1)
    lr: float = Field(0.05, gt=0.0)

    @model_validator(mode="after")
    def _check(self):
        self.to_config()
        return self

    def to_config(self, **over):
        kw = self.model_dump()
        kw.update(over)
        return SrpoConfig(**kw)


class BanditSpec(_Strict):
    grid: int = Field(5, ge=1)
    extent: float = Field(3.0, gt=0.0)
    inv_betas: list[float] = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0]
    init_jitter: float = Field(0.0, ge=0.0)


class DensitySpec(_Strict):
    t_list: list[float] = [0.02]
    resolution: int = Field(60, ge=2)
    bounds: tuple[float, float, float, float] = (-4.5, 4.5, -4.5, 4.5)
    ode_steps: int = Field(200, ge=50)
    png: bool = False
    threshold_samples: int = Field(1000, ge=10)
    threshold_pct: float = Field(10.0, gt=0.0, lt=100.0)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    kind: Literal[KINDS]
    seed: int = 0
    out: Optional[str] = None
    dataset: DatasetSpec = DatasetSpec()
    chain: ChainSpec = ChainSpec()
    behavior: BehaviorSpec = BehaviorSpec()
    critic: CriticSpec = CriticSpec()
    srpo: SrpoSpec = SrpoSpec()
    bandit: BanditSpec = BanditSpec()
    density: DensitySpec = DensitySpec()

    def canonical(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(data):
    """Validate a mapping into an ``ExperimentConfig``; raises ``ConfigError``."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return parse_config(data)


def _source_version():
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    """What a run used and produced: config hash, version, timing, artifacts, metrics."""

    def __init__(self, config, out_dir):
        self.config_hash = config.digest()
        self.kind = config.kind
        self.version = _source_version()
        self.out_dir = Path(out_dir)
        self.started = _now()
        self.finished = None
        self.artifacts = []
        self.metrics = {}

    def add(self, path):
        path = Path(path)
        rel = str(path.relative_to(self.out_dir)) if path.is_relative_to(self.out_dir) else str(path)
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return path

    def to_dict(self):
        return {"config_hash": self.config_hash, "kind": self.kind, "version": self.version,
                "started": self.started, "finished": self.finished,
                "artifacts": sorted(self.artifacts), "metrics": self.metrics}

    def write(self):
        self.finished = _now()
        path = self.out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def default_out_root():
    return Path(os.environ.get(OUT_ENV, "runs"))


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _write_metrics(man, metrics):
    man.metrics.update(metrics)
    rows = sorted((k, v) for k, v in man.metrics.items())
    return man.add(_write_rows(man.out_dir / "metrics.csv", ("metric", "value"), rows))


# stages -------------------------------------------------------------------

def _bandit_samples(cfg):
    if cfg.dataset.path:
        data = load_dataset(cfg.dataset.path)
        if not hasattr(data, "samples"):
            raise ConfigError(f"{cfg.dataset.path} is not a bandit dataset")
        return data.samples
    if cfg.dataset.name == "chain":
        raise ConfigError("this experiment needs a 2-D bandit dataset, not 'chain'")
    return make_bandit(cfg.dataset.name, cfg.dataset.n, derive_seed(cfg.seed, "dataset")).samples


def _behavior_train_config(spec, seed):
    return BehaviorTrainConfig(steps=spec.steps, batch_size=spec.batch_size, lr=spec.lr,
                               lr_schedule=spec.lr_schedule, ema_decay=spec.ema_decay,
                               t_sampling=spec.t_sampling,
                               ckpt_interval=spec.ckpt_interval, seed=seed)


def obtain_behavior(cfg, man, samples=None, require=False):
    """Load the configured behavior checkpoint, or train one into the run directory."""
    spec = cfg.behavior
    if spec.checkpoint:
        if not Path(spec.checkpoint).exists():
            raise DependencyError(f"stage '{cfg.kind}' needs a behavior checkpoint; "
                                  f"{spec.checkpoint} not found (run train-behavior first)")
        return BehaviorNet.load(spec.checkpoint)
    if require:
        raise DependencyError(f"stage '{cfg.kind}' needs behavior.checkpoint "
                              "(run train-behavior first)")
    samples = _bandit_samples(cfg) if samples is None else samples
    model = BehaviorNet(samples.shape[1], width=spec.width, n_blocks=spec.n_blocks,
                        dropout=spec.dropout, num_frequencies=spec.num_frequencies,
                        frequency_scale=spec.frequency_scale, dtype=spec.dtype,
                        linear_skip=spec.linear_skip,
                        seed=derive_seed(cfg.seed, "behavior.init"))
    out = man.out_dir / "behavior"
    train_behavior(model, samples, config=_behavior_train_config(spec, derive_seed(cfg.seed, "behavior.train")),
                   out_dir=out)
    man.add(out / "behavior.npz")
    man.add(out / "loss_curve.csv")
    return model


def _chain(cfg):
    c = cfg.chain
    return generate_chain_mdp(c.n_states, c.rewards, c.behavior_mix, c.gamma, c.n_per_state,
                              seed=derive_seed(cfg.seed, "dataset"))


def run_train_behavior(cfg, man):
    if cfg.dataset.name == "chain" and not cfg.dataset.path:
        data = _chain(cfg)
        samples, states = data.actions, data.states
    elif cfg.dataset.path:
        data = load_dataset(cfg.dataset.path)
        samples = getattr(data, "samples", None)
        states = None
        if samples is None:
            samples, states = data.actions, data.states
    else:
        samples, states = _bandit_samples(cfg), None
    spec = cfg.behavior
    model = BehaviorNet(samples.shape[1], 0 if states is None else states.shape[1],
                        width=spec.width, n_blocks=spec.n_blocks, dropout=spec.dropout,
                        num_frequencies=spec.num_frequencies,
                        frequency_scale=spec.frequency_scale, dtype=spec.dtype,
                        linear_skip=spec.linear_skip,
                        seed=derive_seed(cfg.seed, "behavior.init"))
    curve = train_behavior(model, samples, states,
                           _behavior_train_config(spec, derive_seed(cfg.seed, "behavior.train")),
                           out_dir=man.out_dir)
    for p in sorted(man.out_dir.glob("behavior*.npz")):
        man.add(p)
    man.add(man.out_dir / "loss_curve.csv")
    _write_metrics(man, {"final_loss": curve[-1][1]})


def run_train_critic(cfg, man):
    data = load_dataset(cfg.dataset.path) if cfg.dataset.path else _chain(cfg)
    if not hasattr(data, "rewards"):
        raise ConfigError("train_critic needs an MDP dataset")
    c = cfg.critic
    pair = CriticPair(data.states.shape[1], data.actions.shape[1], tuple(c.hidden), c.tau,
                      data.gamma, c.rho, c.lr, seed=derive_seed(cfg.seed, "critic.init"))
    curve = train_critic(pair, data, c.steps, c.batch_size,
                         seed=derive_seed(cfg.seed, "critic.train"), out_dir=man.out_dir)
    man.add(man.out_dir / "critic.npz")
    man.add(man.out_dir / "critic_loss.csv")
    states = np.unique(data.states, axis=0)
    metrics = {"final_v_loss": curve[-1][1], "final_q_loss": curve[-1][2]}
    for s in states:
        metrics[f"V[s={int(np.argmax(s))}]"] = float(pair.state_value(s[None])[0])
    _write_metrics(man, metrics)


def density_threshold(model, samples, n, pct, seed, ode_steps=200):
    """``pct``-th percentile of the model's log-density over ``n`` dataset samples."""
    rng = np.random.default_rng(seed)
    pick = samples[rng.choice(len(samples), size=min(n, len(samples)), replace=False)]
    return float(np.percentile(log_density(model, pick, ode_steps=ode_steps), pct))


def _scatter(man, name, rows):
    return man.add(_write_rows(man.out_dir / name,
                               ("a_tar_x", "a_tar_y", "a_x", "a_y", "beta", "omega_mode"), rows))


def _beta_of(inv_beta):
    return math.inf if inv_beta == 0 else 1.0 / inv_beta


def _sweep_bandit(cfg, man, model, variants, tag):
    """Extract on the target grid for each ``(label, srpo overrides)``; write scatter rows."""
    a_tar = target_grid(cfg.bandit.grid, cfg.bandit.extent)
    schedule = VPSchedule()
    rows, results = [], {}
    for label, over in variants:
        scfg = cfg.srpo.to_config(**over)
        res = extract_bandit(model, a_tar, scfg, schedule, seed=derive_seed(cfg.seed, f"extract.{label}"),
                             init_jitter=cfg.bandit.init_jitter)
        acts = res.policy.params["actions"]
        results[label] = acts
        for t, a in zip(a_tar, acts):
            rows.append((t[0], t[1], a[0], a[1], scfg.beta, scfg.omega_mode))
    _scatter(man, f"{tag}_scatter.csv", rows)
    return a_tar, results


def _support_metrics(model, actions, threshold, ode_steps):
    ld = log_density(model, actions, ode_steps=ode_steps)
    return ld, float(np.mean(ld > threshold))


def run_extract(cfg, man):
    model = obtain_behavior(cfg, man, require=True)
    _, res = _sweep_bandit(cfg, man, model, [("run", {})], "extract")
    acts = res["run"]
    a_tar = target_grid(cfg.bandit.grid, cfg.bandit.extent)
    ActionTable(acts).save(man.out_dir / "policy.npz", {"beta": cfg.srpo.beta})
    man.add(man.out_dir / "policy.npz")
    _write_metrics(man, {"mean_dist_to_target": float(np.mean(np.linalg.norm(acts - a_tar, axis=1)))})


def run_density_map(cfg, man):
    model = obtain_behavior(cfg, man, require=True)
    d = cfg.density
    metrics = {}
    for t in d.t_list:
        grid = density_grid(model, d.bounds, (d.resolution, d.resolution), t_eval=t,
                            ode_steps=d.ode_steps)
        man.add(grid.to_csv(man.out_dir / f"density_t{t:g}.csv"))
        if d.png:
            man.add(grid.render_png(man.out_dir / f"density_t{t:g}.png"))
        metrics[f"integral[t={t:g}]"] = grid.integral()
        metrics[f"total_variation[t={t:g}]"] = grid.total_variation()
    _write_metrics(man, metrics)


def run_figure3(cfg, man):
    samples = _bandit_samples(cfg)
    model = obtain_behavior(cfg, man, samples)
    variants = [(f"ib{ib:g}", {"beta": _beta_of(ib)}) for ib in cfg.bandit.inv_betas]
    a_tar, res = _sweep_bandit(cfg, man, model, variants, "figure3")
    d = cfg.density
    thr = density_threshold(model, samples, d.threshold_samples, d.threshold_pct,
                            derive_seed(cfg.seed, "threshold"), d.ode_steps)
    metrics = {"density_threshold": thr}
    for (label, _), ib in zip(variants, cfg.bandit.inv_betas):
        acts = res[label]
        metrics[f"mean_dist[1/beta={ib:g}]"] = float(np.mean(np.linalg.norm(acts - a_tar, axis=1)))
    _, frac = _support_metrics(model, res[variants[-1][0]], thr, d.ode_steps)
    metrics["frac_in_support[max 1/beta]"] = frac
    grid = density_grid(model, d.bounds, (d.resolution, d.resolution), t_eval=d.t_list[0],
                        ode_steps=d.ode_steps)
    man.add(grid.to_csv(man.out_dir / "density.csv"))
    if d.png:
        man.add(grid.render_png(man.out_dir / "density.png", scatter=res[variants[-1][0]]))
    _write_metrics(man, metrics)


def run_figure5(cfg, man):
    samples = _bandit_samples(cfg)
    model = obtain_behavior(cfg, man, samples)
    d = cfg.density
    metrics = {}
    for t in d.t_list:
        grid = density_grid(model, d.bounds, (d.resolution, d.resolution), t_eval=t,
                            ode_steps=d.ode_steps)
        man.add(grid.to_csv(man.out_dir / f"density_t{t:g}.csv"))
        metrics[f"total_variation[t={t:g}]"] = grid.total_variation()
    hi = cfg.srpo.t_range[1]
    # beta is read as the single-time strength; the ensemble is rescaled to match it
    gain = ensemble_gain(cfg.srpo.to_config(omega_mode="sigma_sq"), VPSchedule())
    metrics["ensemble_gain"] = gain
    variants = [("sigma_sq", {"omega_mode": "sigma_sq", "beta": cfg.srpo.beta * gain}),
                ("dirac_small", {"omega_mode": "dirac_t0", "dirac_t0": cfg.srpo.t_range[0]}),
                ("dirac_large", {"omega_mode": "dirac_t0", "dirac_t0": hi})]
    _, res = _sweep_bandit(cfg, man, model, variants, "figure5")
    thr = density_threshold(model, samples, d.threshold_samples, d.threshold_pct,
                            derive_seed(cfg.seed, "threshold"), d.ode_steps)
    metrics["density_threshold"] = thr
    for label, _ in variants:
        metrics[f"frac_in_support[{label}]"] = _support_metrics(model, res[label], thr, d.ode_steps)[1]
    _write_metrics(man, metrics)


def run_figure2(cfg, man):
    """Mode seeking on two equal-value modes: SRPO vs forward-KL vs Gaussian reverse-KL."""
    samples = _bandit_samples(cfg)
    model = obtain_behavior(cfg, man, samples)
    center = samples.mean(axis=0, keepdims=True)
    scfg = cfg.srpo.to_config()
    q = QuadraticQ(center)
    states = np.arange(1)
    res = extract_bandit(model, center, scfg, VPSchedule(), seed=derive_seed(cfg.seed, "extract"),
                         init_jitter=max(cfg.bandit.init_jitter, 1e-3))
    srpo_a = res.policy.params["actions"]
    fkl = forward_kl_baseline(samples, states, q, scfg.beta, ActionTable(center.copy()),
                              seed=derive_seed(cfg.seed, "fkl"))
    rkl = gaussian_reverse_kl_baseline(samples, states, q, scfg, ActionTable(center.copy()),
                                       rng=np.random.default_rng(derive_seed(cfg.seed, "rkl")))
    acts = {"srpo": srpo_a[0], "forward_kl": fkl.params["actions"][0],
            "reverse_kl_gaussian": rkl.params["actions"][0]}
    # modes: cluster the data by the sign of its leading principal direction
    centered = samples - center
    axis = np.linalg.svd(centered[:5000], full_matrices=False)[2][0]
    side = centered @ axis > 0
    modes = np.stack([samples[side].mean(axis=0), samples[~side].mean(axis=0)])
    half = 0.5 * float(np.linalg.norm(modes[0] - modes[1]))
    ld = log_density(model, np.stack(list(acts.values())), ode_steps=cfg.density.ode_steps)
    rows, metrics = [], {"mode_half_distance": half}
    for (name, a), l in zip(acts.items(), ld):
        dist = float(np.min(np.linalg.norm(modes - a, axis=1)))
        rows.append((name, float(a[0]), float(a[1]), dist, float(l)))
        metrics[f"mode_dist[{name}]"] = dist
        metrics[f"log_density[{name}]"] = float(l)
    man.add(_write_rows(man.out_dir / "figure2.csv",
                        ("method", "a_x", "a_y", "dist_to_nearest_mode", "log_density"), rows))
    _write_metrics(man, metrics)


def run_ablation(cfg, man):
    samples = _bandit_samples(cfg)
    model = obtain_behavior(cfg, man, samples)
    if cfg.kind == "ablation_omega":
        variants = [("sigma_sq", {"omega_mode": "sigma_sq"}),
                    ("dirac_t0", {"omega_mode": "dirac_t0"})]
    elif cfg.kind == "ablation_baseline":
        variants = [("baseline_on", {"use_baseline": True}),
                    ("baseline_off", {"use_baseline": False})]
    else:
        variants = [("fixed", {"beta_mode": "fixed"}),
                    ("grad_normalized", {"beta_mode": "grad_normalized"})]
    a_tar, res = _sweep_bandit(cfg, man, model, variants, cfg.kind)
    d = cfg.density
    thr = density_threshold(model, samples, d.threshold_samples, d.threshold_pct,
                            derive_seed(cfg.seed, "threshold"), d.ode_steps)
    metrics = {"density_threshold": thr}
    for label, _ in variants:
        acts = res[label]
        metrics[f"mean_dist[{label}]"] = float(np.mean(np.linalg.norm(acts - a_tar, axis=1)))
        metrics[f"frac_in_support[{label}]"] = _support_metrics(model, acts, thr, d.ode_steps)[1]
    _write_metrics(man, metrics)


_RUNNERS = {
    "train_behavior": run_train_behavior,
    "train_critic": run_train_critic,
    "extract": run_extract,
    "density_map": run_density_map,
    "figure2": run_figure2,
    "figure3": run_figure3,
    "figure5_ensemble": run_figure5,
    "ablation_omega": run_ablation,
    "ablation_baseline": run_ablation,
    "ablation_beta": run_ablation,
}


def run(config, out_dir=None):
    """Execute one experiment; returns its ``RunManifest`` (also written to disk)."""
    if isinstance(config, dict):
        config = parse_config(config)
    out_dir = Path(out_dir or config.out or default_out_root() / config.kind)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = RunManifest(config, out_dir)
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(config.model_dump(mode="json"), fh, sort_keys=True)
    man.add(out_dir / "config.yaml")
    log.info("run %s -> %s", config.kind, out_dir)
    _RUNNERS[config.kind](config, man)
    man.write()
    return man


# sweeps -------------------------------------------------------------------

def _set_dotted(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def expand_sweep(spec):
    """Cell configs (plain dicts) from ``{base, axes}`` or ``{base, cells}``."""
    if not isinstance(spec, dict) or "base" not in spec:
        raise ConfigError("a sweep file needs a 'base' config")
    unknown = set(spec) - {"schema_version", "kind", "base", "axes", "cells", "out"}
    if unknown:
        raise ConfigError(f"unknown sweep fields: {sorted(unknown)}")
    base = spec["base"]
    if "cells" in spec:
        overrides = spec["cells"]
    else:
        axes = spec.get("axes") or {}
        keys = list(axes)
        overrides = [dict(zip(keys, vals)) for vals in itertools.product(*(axes[k] for k in keys))]
    cells = []
    for over in overrides:
        c = copy.deepcopy(base)
        for k, v in over.items():
            _set_dotted(c, k, v)
        cells.append((over, c))
    return cells


def _run_cell(args):
    idx, over, data, out = args
    try:
        man = run(parse_config(data), out)
        return idx, over, "ok", man.metrics, ""
    except Exception as exc:  # recorded, the sweep carries on
        log.error("sweep cell %d failed: %s", idx, exc)
        return idx, over, "failed", {}, f"{type(exc).__name__}: {exc}".splitlines()[0]


def sweep(spec, out_dir, parallel=1):
    """Run every cell, write ``aggregate.csv``; returns ``(rows, n_failed)``."""
    cells = expand_sweep(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, over, data, out_dir / f"cell_{i:03d}") for i, (over, data) in enumerate(cells)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    axis_keys = sorted({k for _, over, *_ in results for k in over})
    metric_keys = sorted({k for r in results for k in r[3]})
    rows = []
    for idx, over, status, metrics, err in results:
        rows.append([f"cell_{idx:03d}", status, *[json.dumps(over.get(k)) for k in axis_keys],
                     *[metrics.get(k, "") for k in metric_keys], err])
    _write_rows(out_dir / "aggregate.csv", ["cell", "status", *axis_keys, *metric_keys, "error"], rows)
    n_failed = sum(r[2] != "ok" for r in results)
    return rows, n_failed
