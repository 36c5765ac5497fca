"""Command-line entry point: ``varigrad {train,variance,kl-table,bench,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 IO error.
"""

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from .data import load_mnist_idx, mnist_paths, synthetic_gaussian_classes
from .diagnostics import estimator_speed_bench, finite_difference_audit, variance_table
from .errors import (ConfigurationError, ConsistencyError, DomainError, FormatError,
                     OptimizerError, StatisticsError, VarigradError)
from .kl import Granularity, KlMode, neg_kl_per_unit
from .layers import EstimatorMode
from .model import Mlp, error_rate, load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import RngStream
from .train import fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

GRADCHECK_TOL = 1e-4
INIT_STREAM = 3
GRADCHECK_BATCH = 16

CONFIG_FILE = "config.txt"
KL_COLUMNS = ("log_alpha", "neg_kl_polynomial", "neg_kl_lower_bound", "neg_kl_quadrature")


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def load_datasets(cfg):
    """(train, validation, test) datasets described by ``cfg``."""
    if cfg.dataset == "mnist":
        data_dir = cfg.data_dir or None
        full = load_mnist_idx(*mnist_paths("train", data_dir))
        head, val = full.split(min(cfg.n_val, full.N - 1))
        train = head.subset(np.arange(min(cfg.n_train, head.N)), "mnist-train")
        test = load_mnist_idx(*mnist_paths("test", data_dir))
        test = test.subset(np.arange(min(cfg.n_test, test.N)), "mnist-test")
        return train, val, test
    total = cfg.n_train + cfg.n_val + cfg.n_test
    per_class = math.ceil(total / cfg.classes)
    full = synthetic_gaussian_classes(per_class, cfg.dim, cfg.classes, cfg.separation,
                                      cfg.data_seed)
    cut1, cut2 = cfg.n_train, cfg.n_train + cfg.n_val
    return (full.subset(np.arange(cut1), full.name + ":train"),
            full.subset(np.arange(cut1, cut2), full.name + ":val"),
            full.subset(np.arange(cut2, total), full.name + ":test"))


def build_model(cfg, n_in, n_out, dims=None):
    dims = dims or [n_in, *cfg.hidden, n_out]
    return Mlp.build(dims, RngStream(cfg.seed, INIT_STREAM), cfg.input_noise, cfg.hidden_noise,
                     Granularity(cfg.granularity), cfg.activation, cfg.input_p, cfg.hidden_p)


def make_optimizer(cfg):
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.avg_decay)


def _train(cfg, train, val):
    model = build_model(cfg, train.D, train.C)
    return fit(model, train, val, cfg.epochs, cfg.M, cfg.mode, cfg.kl, cfg.kl_scale, cfg.seed,
               make_optimizer(cfg), cfg.patience or None, cfg.with_replacement)


def _prepare_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    write_text(os.path.join(cfg.out, CONFIG_FILE), cfg.echo())


# commands


def cmd_train(cfg):
    train, val, test = load_datasets(cfg)
    _prepare_out(cfg)
    result = _train(cfg, train, val)
    write_text(os.path.join(cfg.out, "metrics.csv"), result.metrics_csv())
    save_checkpoint(result.model, os.path.join(cfg.out, "checkpoint.json"))
    summary = {"best_epoch": result.best_epoch, "best_val_error": result.best_val_error,
               "test_error": error_rate(result.model, test.X, test.y), "steps": result.steps}
    write_text(os.path.join(cfg.out, "summary.json"),
               json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_variance(cfg):
    train, val, _ = load_datasets(cfg)
    if cfg.checkpoint:
        if not os.path.exists(cfg.checkpoint):
            raise ConfigurationError(f"checkpoint {cfg.checkpoint} does not exist",
                                     field="checkpoint")
        model = load_checkpoint(cfg.checkpoint)
        tag = os.path.basename(cfg.checkpoint)
    elif cfg.fresh_train:
        model = _train(cfg, train, val).model
        tag = f"epochs={cfg.epochs}"
    else:
        raise ConfigurationError("variance needs checkpoint=PATH or fresh_train=true",
                                 field="checkpoint")
    _prepare_out(cfg)
    report = variance_table(model, train, cfg.variance_modes, cfg.M, cfg.R,
                            layers=list(cfg.variance_layers) or None,
                            with_replacement=cfg.with_replacement, seed=cfg.seed,
                            kl_mode=cfg.kl, kl_scale=cfg.kl_scale, epoch_tag=tag)
    text = report.to_csv()
    write_text(os.path.join(cfg.out, "variance.csv"), text)
    return report


def kl_grid(cfg):
    if cfg.kl_alphas:
        alphas = np.array(cfg.kl_alphas, dtype=np.float64)
        if np.any(~(alphas > 0)) or np.any(alphas > 1):
            raise DomainError("kl-table alphas must lie in (0, 1]")
        return alphas
    return np.exp(np.linspace(math.log(cfg.kl_min_alpha), 0.0, cfg.kl_points))


def kl_rows(alphas):
    rows = []
    for a in alphas:
        la = float(np.log(a))
        rows.append([repr(la)] + [repr(float(neg_kl_per_unit(la, m)))
                                  for m in (KlMode.POLYNOMIAL, KlMode.LOWER_BOUND,
                                            KlMode.QUADRATURE)])
    return rows


def cmd_kl_table(cfg):
    rows = kl_rows(kl_grid(cfg))
    _prepare_out(cfg)
    write_text(os.path.join(cfg.out, "kl_table.csv"), csv_text(KL_COLUMNS, rows))
    return rows


def cmd_bench(cfg):
    modes = [EstimatorMode(m) for m in cfg.variance_modes]
    reports = [json.loads(estimator_speed_bench(K, K, cfg.bench_M, modes, cfg.trials,
                                                cfg.seed).to_json())
               for K in cfg.bench_dims]
    _prepare_out(cfg)
    write_text(os.path.join(cfg.out, "bench.json"),
               json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return reports


def cmd_gradcheck(cfg):
    dims = list(cfg.gradcheck_dims)
    rng = RngStream(cfg.seed, INIT_STREAM + 1)
    X = rng.normal((GRADCHECK_BATCH, dims[0]))
    y = rng.integers(dims[-1], GRADCHECK_BATCH)
    model = build_model(cfg, dims[0], dims[-1], dims)
    # interior point so the alpha <= 1 boundary is not straddled
    for layer in model.layers:
        if layer.adaptive:
            la = layer.posterior.log_alpha
            la[...] = np.minimum(la, -0.1)
    worst = finite_difference_audit(model, X, y, cfg.h, cfg.mode, cfg.seed, kl_mode=cfg.kl,
                                    kl_scale=cfg.kl_scale)
    _prepare_out(cfg)
    rows = [[k, repr(v)] for k, v in worst.items()]
    write_text(os.path.join(cfg.out, "gradcheck.csv"), csv_text(("parameter", "max_rel_error"), rows))
    bad = {k: v for k, v in worst.items() if not v < GRADCHECK_TOL}
    if bad:
        raise OptimizerError(f"gradient check failed: {bad}", path=next(iter(bad)))
    return worst


COMMANDS = {"train": cmd_train, "variance": cmd_variance, "kl-table": cmd_kl_table,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def build_parser():
    parser = argparse.ArgumentParser(prog="varigrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--noise", help="noise type for every layer (typeA, typeB, binary, "
                                       "gaussian-fixed, none)")
        for key in cfgmod.RunConfig.keys():
            flags = [f"--{key}"]
            if "_" in key:
                flags.append(f"--{key.replace('_', '-')}")
            p.add_argument(*flags, dest=key, metavar=key.upper(), default=argparse.SUPPRESS)
    return parser


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    overrides = {}
    if args.noise is not None:
        overrides["input_noise"] = overrides["hidden_noise"] = args.noise
    for key in cfgmod.RunConfig.keys():
        if key in vars(args):
            overrides[key] = cfgmod.convert(key, getattr(args, key))
    return cfg.replace(**overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (ConfigurationError, StatisticsError, DomainError) as exc:
        field = getattr(exc, "field", None)
        print(f"varigrad: configuration error{f' [{field}]' if field else ''}: {exc}",
              file=sys.stderr)
        return EXIT_CONFIG
    except (OptimizerError, FloatingPointError) as exc:
        print(f"varigrad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ConsistencyError) as exc:
        print(f"varigrad: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VarigradError as exc:
        print(f"varigrad: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
