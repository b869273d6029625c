"""Command-line harness: ``fatssl train``, ``fatssl verify`` and ``fatssl genbad``.

Configuration is a plain key=value file (one pair per line, ``#`` comments).
Values resolve in this order, later winning: built-in defaults, per-dataset
defaults, the config file, command-line flags. ``train`` writes the fully
resolved settings to ``manifest.cfg`` so that ``--config manifest.cfg``
replays the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, nn
from .badgen import BadGenHyper, generate_bad_samples, write_bad_csv, write_pgm_grid
from .data import (DATA_DIR_ENV, IdxFormatError, Normalization, SslDataset, load_mnist,
                   make_clusters, mnist_dir, ssl_split)
from .nn import ConfigurationError
from .trainer import (METHODS, FatConfig, TrainingDiverged, evaluate, train,
                      write_metrics_csv)
from .vat import VatHyper
from .verify import SUITES, run_suite

DATASETS = ("moons", "blobs3", "blobs4", "ring", "mnist")

# key -> (parser name, default); "auto" xi means 1e-6 times the data diameter
SCHEMA = {
    "method": ("method", "fat"),
    "dataset": ("dataset", "moons"),
    "labels": ("int", 8),
    "n_unlabeled": ("int", 1000),
    "n_validation": ("int", 200),
    "spread": ("float", 0.05),
    "data_seed": ("int", 0),
    "mnist_dir": ("str", ""),
    "epsilon": ("float", 0.3),
    "xi": ("xi", "auto"),
    "power_iters": ("int", 1),
    "capital_c": ("float", 0.6),
    "alpha": ("float", 0.01),
    "lambda_max": ("float", 1.0),
    "lambda_step": ("float", 0.1),
    "epochs": ("int", 60),
    "batch": ("int", 32),
    "labeled_batch": ("int", 8),
    "lr": ("float", 2e-3),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.999),
    "adam_eps": ("float", 1e-8),
    "seed": ("int", 0),
    "hidden": ("ints", (100, 100)),
    "activation": ("activation", "relu"),
    "batch_norm": ("bool", False),
    "dump_epochs": ("ints", ()),
}

DATASET_DEFAULTS = {
    "moons": {},
    "blobs3": {"spread": 0.5, "labels": 12},
    "blobs4": {"spread": 0.5, "labels": 16},
    "ring": {"spread": 0.15},
    "mnist": {"labels": 100, "n_unlabeled": 10000, "n_validation": 1000, "epsilon": 1.5,
              "capital_c": 2.0, "hidden": (256, 128), "epochs": 50, "batch": 100,
              "labeled_batch": 32, "lr": 1e-3},
}

FLAG_KEYS = {
    "method": "method", "dataset": "dataset", "labels": "labels", "epsilon": "epsilon",
    "capital_c": "capital_c", "alpha": "alpha", "xi": "xi", "power_iters": "power_iters",
    "lambda_step": "lambda_step", "lambda_max": "lambda_max", "epochs": "epochs",
    "batch": "batch", "seed": "seed", "mnist_dir": "mnist_dir", "dump_epochs": "dump_epochs",
}


def _choice(name, options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {options}")
        return text
    parse.__name__ = name
    return parse


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _ints(text):
    if isinstance(text, tuple):
        return text
    text = str(text).strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _xi(text):
    return "auto" if str(text).strip() == "auto" else float(text)


PARSERS = {
    "int": int, "float": float, "str": str, "bool": _bool, "ints": _ints, "xi": _xi,
    "method": _choice("method", METHODS), "dataset": _choice("dataset", DATASETS),
    "activation": _choice("activation", ("relu", "leaky_relu")),
}


def _convert(key, value):
    kind = SCHEMA[key][0]
    try:
        return PARSERS[kind](value) if isinstance(value, str) else value
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot read {value!r} as {kind} ({exc})") from None


def read_config_file(path) -> dict:
    """Parse a key=value file. Unknown keys and malformed lines are errors."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_settings(file_values=None, overrides=None) -> dict:
    """Merge defaults, dataset defaults, file values and overrides, then validate."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in list(file_values) + list(overrides):
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown key {key!r}")
    overrides = {k: _convert(k, v) for k, v in overrides.items()}
    file_values = {k: _convert(k, v) for k, v in file_values.items()}
    dataset = overrides.get("dataset", file_values.get("dataset", SCHEMA["dataset"][1]))
    settings = {k: default for k, (_, default) in SCHEMA.items()}
    settings.update(DATASET_DEFAULTS[_convert("dataset", dataset)])
    settings.update(file_values)
    settings.update(overrides)
    _validate(settings)
    return settings


def _validate(s):
    if s["dataset"] == "mnist":
        if s["labels"] % 10:
            raise ConfigurationError(f"labels must be a multiple of 10 for mnist, got {s['labels']}")
    else:
        k = dataset_classes(s["dataset"])
        if s["labels"] < k or s["labels"] % k:
            raise ConfigurationError(f"labels must be a positive multiple of {k}, got {s['labels']}")
        if s["spread"] <= 0:
            raise ConfigurationError("spread must be > 0")
    if s["n_unlabeled"] < 1 or s["n_validation"] < 0:
        raise ConfigurationError("n_unlabeled must be >= 1 and n_validation >= 0")
    if not s["hidden"] or min(s["hidden"]) < 1:
        raise ConfigurationError("hidden must list at least one positive width")
    if any(e < 0 for e in s["dump_epochs"]):
        raise ConfigurationError("dump_epochs must be >= 0")
    if s["xi"] != "auto" and not s["xi"] > 0:
        raise ConfigurationError(f"xi must be > 0, got {s['xi']}")
    # hyperparameter constraints live with the dataclasses
    fat_config(s, diameter=1.0)


def dataset_classes(name):
    return {"moons": 2, "blobs3": 3, "blobs4": 4, "ring": 2, "mnist": 10}[name]


def fat_config(s, diameter) -> FatConfig:
    xi = 1e-6 * diameter if s["xi"] == "auto" else s["xi"]
    return FatConfig(
        vat_hyper=VatHyper(s["epsilon"], xi, s["power_iters"]),
        badgen_hyper=BadGenHyper(s["capital_c"], s["alpha"]),
        lambda_max=s["lambda_max"], lambda_step=s["lambda_step"], epochs=s["epochs"],
        labeled_batch=s["labeled_batch"], unlabeled_batch=s["batch"], lr=s["lr"],
        beta1=s["beta1"], beta2=s["beta2"], adam_eps=s["adam_eps"], seed=s["seed"],
        method=s["method"], hidden=tuple(s["hidden"]), activation=s["activation"],
        batch_norm=s["batch_norm"],
    )


def load_dataset(s) -> SslDataset:
    name = s["dataset"]
    if name == "mnist":
        directory = mnist_dir(s["mnist_dir"] or None)
        if directory is None:
            raise ConfigurationError(f"mnist needs --mnist-dir or ${DATA_DIR_ENV}")
        (tr_X, tr_y), (te_X, te_y) = load_mnist(directory)
        # load_idx already flattens and divides by 255
        norm = Normalization(np.zeros(tr_X.shape[1]), np.full(tr_X.shape[1], 255.0))
        return ssl_split(tr_X, tr_y, s["labels"], s["n_validation"], s["data_seed"],
                         n_unlabeled=s["n_unlabeled"], test=(te_X, te_y),
                         normalization=norm,
                         description=f"mnist labels={s['labels']} unlabeled={s['n_unlabeled']}")
    layout = {"moons": "two_moons", "ring": "gaussian_ring"}.get(name, "gaussian_blobs")
    k = dataset_classes(name)
    return make_clusters(k, s["n_unlabeled"], s["labels"] // k, s["spread"], layout,
                         seed=s["data_seed"], n_validation=s["n_validation"])


def format_manifest(s, extra_comments=()) -> str:
    lines = [f"# fatssl {__version__} run manifest", *[f"# {c}" for c in extra_comments]]
    for key in SCHEMA:
        v = s[key]
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def dump_bad_samples(model, ds, cfg, path_stem, rng) -> float:
    """Write one bad sample per unlabeled input; returns the kept fraction."""
    batch = generate_bad_samples(model, ds.unlabeled_X, cfg.vat_hyper, cfg.badgen_hyper, rng)
    if ds.input_dim == 2:
        write_bad_csv(batch, f"{path_stem}.csv")
    else:
        # image data is stored in [0, 1], which is what the PGM writer expects
        side = int(round(np.sqrt(ds.input_dim)))
        write_pgm_grid(batch.kept_points, f"{path_stem}.pgm", side=side)
    return float(np.mean(batch.kept)) if len(batch) else 0.0


@dataclass
class TrainOutcome:
    out: Path
    final_test_acc: float
    best_test_acc: float
    time_ratio: float | None


def _supervised_epoch_seconds(s, ds):
    sup = dict(s, method="supervised", epochs=1)
    t0 = time.perf_counter()
    train(fat_config(sup, ds.diameter()), ds)
    return time.perf_counter() - t0


def run_train(s, out, timing=True, stream=None) -> TrainOutcome:
    stream = stream or sys.stdout
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(s)
    cfg = fat_config(s, ds.diameter())
    comments = [f"data: {ds.description}", f"resolved xi: {cfg.vat_hyper.xi!r}",
                "outputs: metrics.csv best.npz last.npz bad_epoch*.{csv,pgm}"]
    (out / "manifest.cfg").write_text(format_manifest(s, comments))

    dumps = set(s["dump_epochs"])

    def on_epoch_end(epoch, model, m):
        print(f"epoch {epoch:3d} lambda {m.lam:.2f} ce {m.loss_ce:.4f} vat {m.loss_vat:.4f} "
              f"val {m.val_acc:.4f} test {m.test_acc:.4f}", file=stream)
        if epoch in dumps:
            frac = dump_bad_samples(model, ds, cfg, out / f"bad_epoch{epoch}",
                                    np.random.default_rng([s["seed"], epoch]))
            print(f"bad samples at epoch {epoch}: kept fraction {frac:.3f}", file=stream)

    t0 = time.perf_counter()
    result = train(cfg, ds, on_epoch_end)
    elapsed = time.perf_counter() - t0
    write_metrics_csv(result.metrics, out / "metrics.csv")
    nn.save_checkpoint(result.best_model, out / "best.npz")
    nn.save_checkpoint(result.last_model, out / "last.npz")

    has_test = len(ds.test_y) > 0
    final = evaluate(result.last_model, ds.test_X, ds.test_y) if has_test else float("nan")
    best = evaluate(result.best_model, ds.test_X, ds.test_y) if has_test else float("nan")
    print(f"final test accuracy {final:.4f}", file=stream)
    print(f"best-validation model test accuracy {best:.4f}", file=stream)
    ratio = None
    if timing and cfg.epochs > 0 and cfg.method != "supervised":
        ratio = (elapsed / cfg.epochs) / _supervised_epoch_seconds(s, ds)
        print(f"time per epoch relative to supervised training: {ratio:.2f}x", file=stream)
    return TrainOutcome(out, final, best, ratio)


def run_genbad(s, checkpoint, out, stream=None) -> float:
    stream = stream or sys.stdout
    model = nn.load_checkpoint(checkpoint)
    ds = load_dataset(s)
    if model.input_dim != ds.input_dim or model.output_dim != ds.n_classes:
        raise nn.ShapeError(f"checkpoint maps {model.input_dim} -> {model.output_dim}, dataset "
                            f"{s['dataset']} needs {ds.input_dim} -> {ds.n_classes}")
    cfg = fat_config(s, ds.diameter())
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    frac = dump_bad_samples(model, ds, cfg, out / "bad_samples", np.random.default_rng(s["seed"]))
    kind = "csv" if ds.input_dim == 2 else "pgm"
    print(f"wrote {out / ('bad_samples.' + kind)}: {len(ds.unlabeled_X)} candidates, "
          f"kept fraction {frac:.3f}", file=stream)
    return frac


def run_verify(name, stream=None) -> bool:
    stream = stream or sys.stdout
    t0 = time.perf_counter()
    res = run_suite(name)
    for line in res.lines:
        print(line, file=stream)
    verdict = "passed" if res.passed else "FAILED"
    print(f"suite {name} {verdict} in {time.perf_counter() - t0:.1f}s", file=stream)
    if not res.passed:
        print("counterexample: " + json.dumps(res.counterexample, default=float), file=stream)
    return res.passed


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--labels", type=int, help="total number of labeled points")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--capital-c", dest="capital_c", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--xi", help="probe scale, or 'auto'")
    p.add_argument("--power-iters", dest="power_iters", type=int)
    p.add_argument("--lambda-step", dest="lambda_step", type=float)
    p.add_argument("--lambda-max", dest="lambda_max", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="unlabeled batch size")
    p.add_argument("--seed", type=int)
    p.add_argument("--mnist-dir", dest="mnist_dir", help=f"MNIST IDX directory (default ${DATA_DIR_ENV})")


def build_parser():
    parser = argparse.ArgumentParser(prog="fatssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fatssl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and write a run directory")
    _add_config_flags(t)
    t.add_argument("--out", default="fatssl-run", help="run directory")
    t.add_argument("--dump-epochs", dest="dump_epochs", help="comma-separated epochs to dump bad samples at")
    t.add_argument("--no-timing", action="store_true", help="skip the supervised timing comparison")

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("suite", choices=SUITES)

    g = sub.add_parser("genbad", help="dump bad samples for a checkpoint")
    _add_config_flags(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", default="fatssl-bad")
    return parser


def settings_from_args(args) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, attr, None) for key, attr in FLAG_KEYS.items()}
    return resolve_settings(file_values, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return 0 if run_verify(args.suite) else 1
        s = settings_from_args(args)
        if args.command == "train":
            run_train(s, args.out, timing=not args.no_timing)
        else:
            run_genbad(s, args.checkpoint, args.out)
        return 0
    except (ConfigurationError, nn.ShapeError, IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
