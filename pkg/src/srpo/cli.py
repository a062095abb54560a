"""Command line entry point: ``srpo <verb> [--config FILE] [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 sweep cell failures or unexpected errors, 2 bad
config, 3 missing dependency or checkpoint, 4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .datasets import make_bandit
from .errors import ConfigError, SrpoError
from .experiments import default_out_root, parse_config, run, sweep

log = logging.getLogger("srpo")

VERB_KINDS = {
    "train-behavior": "train_behavior",
    "train-critic": "train_critic",
    "extract": "extract",
    "density": "density_map",
}
FIGURE_KINDS = {
    "figure2": "figure2",
    "figure3": "figure3",
    "figure5": "figure5_ensemble",
    "figure5_ensemble": "figure5_ensemble",
    "ablation_omega": "ablation_omega",
    "ablation_baseline": "ablation_baseline",
    "ablation_beta": "ablation_beta",
}


def _read_yaml(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return data


def _experiment(args, kind):
    data = _read_yaml(args.config)
    if data.get("kind", kind) != kind:
        raise ConfigError(f"config kind {data['kind']!r} does not match verb ({kind})")
    data["kind"] = kind
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = parse_config(data)
    out = args.out or cfg.out or default_out_root() / kind
    man = run(cfg, out)
    for k, v in sorted(man.metrics.items()):
        print(f"{k}: {v}")
    print(f"manifest: {Path(out) / 'manifest.json'}")
    return 0


def _gen_data(args):
    try:
        data = make_bandit(args.name, args.n, args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or default_out_root() / f"{args.name}.npz")
    data.save(out)
    if args.csv:
        data.to_csv(out.with_suffix(".csv"))
    print(f"wrote {len(data.samples)} samples to {out}")
    return 0


def _sweep(args):
    spec = _read_yaml(args.config)
    if not spec:
        raise ConfigError("sweep needs --config")
    if args.seed is not None:
        spec.setdefault("base", {})["seed"] = args.seed
    out = args.out or spec.get("out") or default_out_root() / "sweep"
    rows, n_failed = sweep(spec, out, args.parallel)
    print(f"{len(rows)} cells, {n_failed} failed; aggregate: {Path(out) / 'aggregate.csv'}")
    return 1 if n_failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="srpo", description="Desk-scale score-regularized policy extraction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: $SRPO_OUT/<kind>)")
        sp.add_argument("--seed", type=int, help="master seed override")

    g = sub.add_parser("gen-data", help="write a 2-D toy dataset")
    g.add_argument("--name", required=True)
    g.add_argument("--n", type=int, default=1_000_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--csv", action="store_true", help="also write a CSV copy")

    for verb in VERB_KINDS:
        common(sub.add_parser(verb))
    f = sub.add_parser("figure", help="reproduce one figure or ablation at desk scale")
    f.add_argument("kind", choices=sorted(FIGURE_KINDS))
    common(f)
    s = sub.add_parser("sweep", help="run a grid of configs")
    common(s)
    s.add_argument("--parallel", type=int, default=1)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "gen-data":
            return _gen_data(args)
        if args.verb == "sweep":
            return _sweep(args)
        if args.verb == "figure":
            return _experiment(args, FIGURE_KINDS[args.kind])
        return _experiment(args, VERB_KINDS[args.verb])
    except SrpoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
