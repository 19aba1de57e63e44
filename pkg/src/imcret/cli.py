"""Command-line entry point: ``imcret <command> [options]``.

Commands: gradcheck, gen-data, train, eval, ablate, sweep.

Option values are resolved as command-line flag > ``--config`` JSON file >
built-in defaults. Every command that writes into ``--out`` also writes
``manifest.json`` with the resolved configuration and library versions.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import FeatureStore, generate_synthetic, load_store, make_split, save_store
from .errors import DataError, DivergenceError, NonFiniteError
from .evaluator import CSV_HEADER, evaluate
from .gradcheck import format_table, run_suite
from .loss import LossConfig
from .model import ProjectionModel
from .trainer import TrainSpec, load_checkpoint, save_checkpoint, train, write_metrics

log = logging.getLogger("imcret")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "data_seed": 42,
    "store_images": None,
    "store_texts": None,
    "index": None,
    "out": None,
    "checkpoint": None,
    "loss": "imc",
    "delta": "l1",
    "lambda": 1.0,
    "alpha": 0.2,
    "mu_down": 0.05,
    "mu_up": 0.5,
    "imc_variant": "as-written",
    "mh_reduction": "per-anchor",
    "epochs": 30,
    "batch": 128,
    "lr": 2e-4,
    "decay_every": 15,
    "decay_factor": 0.1,
    "dropout": 0.5,
    "dim": 16,
    "num_classes": 100,
    "captions_per_image": 5,
    "d_in": 64,
    "noise": 0.05,
    "seeds": 1,
    "lambdas": "0,0.5,1,2",
    "gradcheck_batches": 3,
    "workers": 1,
}

ABLATION_ROWS = [(0.0, "l1"), (1.0, "msd"), (1.0, "cos"), (1.0, "l2"), (1.0, "l1")]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    a = common.add_argument
    a("--config", metavar="PATH", help="JSON file of option values")
    a("--seed", type=int, help="training seed (init, shuffling, dropout)")
    a("--data-seed", type=int, help="seed for synthetic data and the split")
    a("--store-images", metavar="PATH")
    a("--store-texts", metavar="PATH")
    a("--index", metavar="PATH", help="caption_id,image_id CSV")
    a("--out", metavar="DIR")
    a("--checkpoint", metavar="PATH")
    a("--loss", choices=["sh", "mh", "imc"])
    a("--delta", choices=["cos", "msd", "l1", "l2"])
    a("--lambda", type=float, dest="lambda")
    a("--alpha", type=float)
    a("--mu-down", type=float)
    a("--mu-up", type=float)
    a("--imc-variant", choices=["as-written", "repulsive"])
    a("--mh-reduction", choices=["per-anchor", "global-max"])
    a("--epochs", type=int)
    a("--batch", type=int)
    a("--lr", type=float)
    a("--decay-every", type=int)
    a("--decay-factor", type=float)
    a("--dropout", type=float)
    a("--dim", type=int, help="joint embedding dimension")
    a("--num-classes", type=int, help="synthetic: number of images")
    a("--captions-per-image", type=int)
    a("--d-in", type=int, help="synthetic: feature dimension of both modalities")
    a("--noise", type=float, help="synthetic: feature noise sigma")
    a("--workers", type=int)
    a("-v", "--verbose", action="store_true")

    p = _Parser(prog="imcret", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all loss gradients")
    g.add_argument("--gradcheck-batches", type=int, default=argparse.SUPPRESS)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic feature store")
    sub.add_parser("train", parents=[common], help="train projection heads")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ab = sub.add_parser("ablate", parents=[common], help="lambda=0 vs lambda=1 with each distance")
    ab.add_argument("--seeds", type=int, default=argparse.SUPPRESS, help="number of training seeds")
    sw = sub.add_parser("sweep", parents=[common], help="train and evaluate once per lambda")
    sw.add_argument("--lambdas", default=argparse.SUPPRESS, help="comma-separated lambda values")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    given = vars(args)
    if "config" in given:
        try:
            file_cfg = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config: {e}") from e
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in given.items() if k in DEFAULTS})
    cfg["command"] = args.command
    return cfg


def loss_config(cfg: dict, **override) -> LossConfig:
    c = {**cfg, **override}
    return LossConfig(
        alpha=c["alpha"],
        lam=c["lambda"],
        mu_down=c["mu_down"],
        mu_up=c["mu_up"],
        delta_kind=c["delta"],
        mh_reduction=c["mh_reduction"],
        imc_variant=c["imc_variant"],
    )


def train_spec(cfg: dict, seed: int | None = None, **override) -> TrainSpec:
    return TrainSpec(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        lr0=cfg["lr"],
        decay_every=cfg["decay_every"],
        decay_factor=cfg["decay_factor"],
        seed=cfg["seed"] if seed is None else seed,
        loss=override.pop("loss", cfg["loss"]),
        loss_cfg=loss_config(cfg, **override),
    )


def _validate(cfg: dict) -> None:
    try:
        train_spec(cfg)
        if not 0 <= cfg["dropout"] < 1:
            raise ValueError("dropout must be in [0, 1)")
        if cfg["dim"] < 1 or cfg["workers"] < 1 or cfg["seeds"] < 1:
            raise ValueError("dim, workers and seeds must be >= 1")
        if cfg["command"] == "sweep" and any(l < 0 for l in parse_lambdas(cfg["lambdas"])):
            raise ValueError("lambda values must be >= 0")
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    if cfg["command"] != "gradcheck" and not cfg["out"]:
        raise UsageError(f"{cfg['command']} needs --out")
    paths = [cfg["store_images"], cfg["store_texts"], cfg["index"]]
    if any(paths) and not all(paths) and cfg["command"] != "gen-data":
        raise UsageError("--store-images, --store-texts and --index go together")


def parse_lambdas(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad lambda list {text!r}") from e


def get_store(cfg: dict) -> FeatureStore:
    """The store named by the store paths, or the seeded synthetic store."""
    if cfg["store_images"]:
        return load_store(cfg["store_images"], cfg["store_texts"], cfg["index"])
    return generate_synthetic(
        np.random.default_rng(cfg["data_seed"]),
        num_classes=cfg["num_classes"],
        captions_per_image=cfg["captions_per_image"],
        d_in_img=cfg["d_in"],
        d_in_txt=cfg["d_in"],
        noise_sigma=cfg["noise"],
        latent_dim=min(cfg["dim"], cfg["d_in"]),
    )


def init_model(cfg: dict, store: FeatureStore, seed: int) -> ProjectionModel:
    return ProjectionModel.init(
        np.random.default_rng([seed, 1]),
        store.image_feats.shape[1],
        store.text_feats.shape[1],
        cfg["dim"],
        dropout_p=cfg["dropout"],
    )


@dataclass
class RunResult:
    model: ProjectionModel
    history: list
    report: object


def run_once(cfg: dict, store: FeatureStore, seed: int, **override) -> RunResult:
    split = make_split(store.num_images, cfg["data_seed"])
    spec = train_spec(cfg, seed, **override)
    model, history = train(store, init_model(cfg, store, seed), split, spec)
    return RunResult(model, history, evaluate(model, store, split, cfg["workers"]))


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, cfg: dict) -> None:
    manifest = {
        "config": cfg,
        "versions": {
            "imcret": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


# commands ------------------------------------------------------------------


def cmd_gradcheck(cfg: dict) -> int:
    results = run_suite(cfg["seed"], loss_config(cfg), n_batches=cfg["gradcheck_batches"])
    print(format_table(results))
    if cfg["out"]:
        out = _out_dir(cfg)
        _write_csv(
            out / "gradcheck.csv",
            ["loss", "delta", "max_rel_error", "passed"],
            [[r.loss.value, r.delta.value, _fmt(r.max_rel_error), int(r.passed)] for r in results],
        )
        write_manifest(out, cfg)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_gen_data(cfg: dict) -> int:
    store = get_store({**cfg, "store_images": None})
    out = _out_dir(cfg)
    paths = (
        cfg["store_images"] or out / "images.cmfv",
        cfg["store_texts"] or out / "texts.cmfv",
        cfg["index"] or out / "index.csv",
    )
    save_store(store, *paths)
    write_manifest(out, cfg)
    print(f"wrote {store.num_images} images, {store.num_captions} captions to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    store = get_store(cfg)
    out = _out_dir(cfg)
    split = make_split(store.num_images, cfg["data_seed"])
    spec = train_spec(cfg)
    model, history = train(store, init_model(cfg, store, cfg["seed"]), split, spec)
    save_checkpoint(cfg["checkpoint"] or out / "checkpoint.imck", model)
    write_metrics(out / "metrics.csv", history)
    write_manifest(out, cfg)
    last = history[-1]
    print(f"trained {len(history)} epochs, final loss {last.train_loss:.4f}, "
          f"best val R-sum {max(h.val_rsum for h in history):.2f}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    store = get_store(cfg)
    out = _out_dir(cfg)
    ckpt = cfg["checkpoint"] or out / "checkpoint.imck"
    model = load_checkpoint(ckpt, dropout_p=cfg["dropout"])
    split = make_split(store.num_images, cfg["data_seed"])
    report = evaluate(model, store, split, cfg["workers"])
    (out / "report.json").write_text(report.to_json() + "\n")
    rows = [["test"] + [_fmt(x) for x in report.csv_row()]]
    if report.folds:
        rows.append(["fold_mean"] + [_fmt(x) for x in report.fold_mean().csv_row()])
    _write_csv(out / "report.csv", ["pool"] + CSV_HEADER, rows)
    write_manifest(out, cfg)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    store = get_store(cfg)
    out = _out_dir(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    rows, summary = [], []
    for lam, delta in ABLATION_ROWS:
        rsums = []
        for seed in seeds:
            r = run_once(cfg, store, seed, loss="imc", **{"lambda": lam, "delta": delta})
            rows.append([_fmt(lam), delta, seed] + [_fmt(x) for x in r.report.csv_row()])
            rsums.append(r.report.rsum)
        sd = statistics.stdev(rsums) if len(rsums) > 1 else 0.0
        summary.append([_fmt(lam), delta, len(rsums), _fmt(statistics.fmean(rsums)), _fmt(sd)])
        print(f"lambda={lam:g} delta={delta:<3} rsum mean {statistics.fmean(rsums):7.2f} sd {sd:6.2f}")
    _write_csv(out / "ablation.csv", ["lambda", "delta", "seed"] + CSV_HEADER, rows)
    _write_csv(out / "ablation_summary.csv", ["lambda", "delta", "seeds", "rsum_mean", "rsum_sd"], summary)
    write_manifest(out, cfg)
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    lambdas = parse_lambdas(cfg["lambdas"])
    store = get_store(cfg)
    out = _out_dir(cfg)
    rows = []
    for lam in lambdas:
        r = run_once(cfg, store, cfg["seed"], loss="imc", **{"lambda": lam})
        rows.append([_fmt(lam)] + [_fmt(x) for x in r.report.csv_row()])
        print(f"lambda={lam:g} rsum {r.report.rsum:.2f}")
    _write_csv(out / "sweep.csv", ["lambda"] + CSV_HEADER, rows)
    write_manifest(out, cfg)
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve(args)
        _validate(cfg)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"imcret: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"imcret: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as e:
        print(f"imcret: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
