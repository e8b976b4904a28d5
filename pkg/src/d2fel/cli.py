"""Command line interface: ``python -m d2fel <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  Heavy imports happen after argument parsing so that
``--threads`` can pin the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bitwise determinism)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2fel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-domain dataset")
    _common(p)

    p = sub.add_parser("train", help="train an ensemble on a protocol's training split")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    p.add_argument("--protocol", choices=("leave-one-out", "single-domain"), default="leave-one-out")
    p.add_argument("--domain", type=int, default=0, help="held-out (leave-one-out) or training domain")

    p = sub.add_parser("extract", help="write a feature bank for one split")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "query", "gallery", "all"), default="all")
    p.add_argument("--domain", type=int, default=None, help="restrict rows to one domain")
    p.add_argument("--name", default=None, help="output file name (default <split>.d2fb)")

    p = sub.add_parser("reduce-fit", help="fit a reducer on a feature bank")
    _common(p)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--method", choices=("rp", "pca", "ae"), required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--ae-epochs", type=int, default=100)
    p.add_argument("--ae-loss", choices=("l1", "l2"), default="l2")

    p = sub.add_parser("reduce-apply", help="apply a saved reducer to a feature bank")
    _common(p)
    p.add_argument("--reducer", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--name", default=None)

    p = sub.add_parser("eval", help="score a query bank against a gallery bank")
    _common(p)
    p.add_argument("--query", type=Path, required=True)
    p.add_argument("--gallery", type=Path, required=True)
    p.add_argument("--distance", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--normalize-heads", action="store_true", help="L2-normalize each head segment first")
    p.add_argument("--no-junk-filter", action="store_true")

    p = sub.add_parser("ablate", help="run a seed-averaged ablation")
    _common(p)
    p.add_argument("--kind", required=True,
                   choices=("components", "depth", "reduction-curve", "concat-vs-average", "autoencoder"))
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed (default 0)")
    p.add_argument("--distance", choices=("euclidean", "cosine"), default=None)
    p.add_argument("--normalize-heads", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> dict:
    from .store import load_json
    return load_json(args.config) if args.config else {}


def _out(args) -> Path:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def _load_data(path: Path):
    import numpy as np
    from .store import load_manifest
    manifest = load_manifest(path / "manifest.jsonl")
    images = np.load(path / "images.npy", allow_pickle=False)
    if len(images) != len(manifest):
        raise ValueError(f"{path}: {len(images)} images for {len(manifest)} manifest rows")
    return manifest, images


def cmd_gen_data(args) -> None:
    import numpy as np
    from .harness import DataConfig
    from .store import save_manifest, write_json
    cfg = DataConfig.from_dict(_config(args))
    seed = 0 if args.seed is None else args.seed
    from .synthdata import generate_dataset
    ds = generate_dataset(seed=seed, **cfg.to_dict())
    out = _out(args)
    save_manifest(out / "manifest.jsonl", ds.manifest)
    np.save(out / "images.npy", ds.images, allow_pickle=False)
    write_json(out / "styles.json", [s.__dict__ for s in ds.styles])
    print(f"wrote {len(ds.manifest)} images to {out}")


def cmd_train(args) -> None:
    import numpy as np
    from .store import save_checkpoint, write_json
    from .synthdata import make_protocol
    from .training import TrainConfig, new_model, train
    data = _config(args)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TrainConfig.from_dict(data)
    manifest, images = _load_data(args.data)
    pr = make_protocol(manifest, args.protocol, args.domain)
    classes, labels = np.unique(manifest.column("identity")[pr.train], return_inverse=True)
    model = new_model(cfg, len(classes))
    report = train(model, images[pr.train], labels, cfg)
    out = _out(args)
    save_checkpoint(out / "checkpoint.d2ck", model, cfg.digest(), cfg.epochs,
                    {"protocol": args.protocol, "domain": args.domain, "classes": classes.tolist()})
    rep = report.to_dict()
    seconds = rep.pop("seconds")
    write_json(out / "report.json", rep)
    write_json(out / "timing.json", {"train_seconds": seconds})
    print(f"final loss {report.epoch_losses[-1]:.4f}; checkpoint in {out}")


def cmd_extract(args) -> None:
    import numpy as np
    from .store import load_checkpoint
    from .synthdata import SPLITS
    from .training import extract
    manifest, images = _load_data(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    split = manifest.column("split")
    rows = np.ones(len(manifest), bool)
    if args.split != "all":
        rows &= split == SPLITS.index(args.split)
    if args.domain is not None:
        rows &= manifest.column("domain") == args.domain
    idx = np.flatnonzero(rows)
    if len(idx) == 0:
        raise ValueError("no manifest rows match the requested split/domain")
    bank = extract(model, images[idx], manifest.column("identity")[idx], manifest.column("camera")[idx],
                   manifest.column("domain")[idx], split[idx])
    path = _out(args) / (args.name or f"{args.split}.d2fb")
    bank.save(path)
    print(f"wrote {len(bank)} x {bank.dim} bank ({len(bank.segments)} segments) to {path}")


def cmd_reduce_fit(args) -> None:
    from .bank import FeatureBank
    from .reduce import fit_autoencoder, fit_pca, fit_random_projector
    from .store import save_reducer
    bank = FeatureBank.load(args.bank)
    seed = 0 if args.seed is None else args.seed
    if args.method == "rp":
        reducer = fit_random_projector(bank.dim, args.dim, seed)
    elif args.method == "pca":
        reducer = fit_pca(bank, args.dim)
    else:
        reducer = fit_autoencoder(bank, args.dim, args.ae_loss, args.ae_epochs, seed=seed)
    path = _out(args) / f"{args.method}-{args.dim}.d2rd"
    save_reducer(path, reducer)
    print(f"wrote {args.method} reducer {bank.dim} -> {args.dim} to {path}")


def cmd_reduce_apply(args) -> None:
    from .bank import FeatureBank
    from .store import load_reducer
    reducer = load_reducer(args.reducer)
    bank = reducer.transform(FeatureBank.load(args.bank))
    path = _out(args) / (args.name or f"{args.bank.stem}-reduced.d2fb")
    bank.save(path)
    print(f"wrote {len(bank)} x {bank.dim} bank to {path}")


def cmd_eval(args) -> None:
    from .bank import FeatureBank, normalize_segments
    from .retrieval import EvalProtocol, evaluate_banks
    from .store import write_json
    q, g = FeatureBank.load(args.query), FeatureBank.load(args.gallery)
    if args.normalize_heads:
        q, g = normalize_segments(q), normalize_segments(g)
    rep = evaluate_banks(q, g, EvalProtocol(args.distance, not args.no_junk_filter)).to_dict()
    seconds = rep.pop("seconds")
    rep["normalize_heads"] = args.normalize_heads
    out = _out(args)
    write_json(out / "eval.json", rep)
    write_json(out / "eval-curve.json", {"x": "rank", "y": "accuracy",
                                         "rank": list(range(1, len(rep["cmc"]) + 1)), "cmc": rep["cmc"]})
    write_json(out / "timing.json", {"eval_seconds": seconds})
    print(f"mAP {100 * rep['mAP']:.2f}  rank-1 {100 * rep['rank1']:.2f}  ({rep['num_valid_queries']} queries)")


def cmd_ablate(args) -> None:
    from .harness import ExperimentConfig, desk_config, run_ablation
    from .store import write_json
    data = _config(args)
    cfg = ExperimentConfig.from_dict(data) if data else desk_config()
    if args.distance:
        cfg.distance = args.distance
    if args.normalize_heads:
        cfg.normalize_heads = True
    start = 0 if args.seed is None else args.seed
    out = _out(args)
    table = run_ablation(args.kind, cfg, range(start, start + args.seeds), out_dir=out)
    seconds = table.seconds
    table.seconds = 0.0
    write_json(out / f"ablation-{args.kind}.json", {**table.to_dict(), "config": cfg.to_dict()})
    write_json(out / f"timing-{args.kind}.json", {"ablation_seconds": seconds})
    print(table.format())


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "extract": cmd_extract,
            "reduce-fit": cmd_reduce_fit, "reduce-apply": cmd_reduce_apply, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)

    import logging
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .bank import BankFormatError
    from .ensemble import ConfigError
    from .losses import ProtocolError as LossProtocolError
    from .ndcore import DimensionError, NumericError
    from .retrieval import ProtocolError
    from .store import CheckpointError

    try:
        COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, json.JSONDecodeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, BankFormatError, CheckpointError, DimensionError, ProtocolError,
            LossProtocolError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
