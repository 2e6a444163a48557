"""Command-line pipeline: stats, split, train, tune, predict, eval.

Every command resolves its settings from an optional JSON config file plus
flag overrides (flags win), then writes a manifest with the fully resolved
configuration into the output directory, so a run can be reproduced from its
manifest alone. Exit codes: 0 ok, 2 config or parse error, 3 diverged
training, 4 evaluation input mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .bayesopt import HyperPoint, HyperSpace, Trial, tune
from .corpus import (
    CorpusParseError,
    Sentence,
    SpanValidationError,
    corpus_entity_types,
    corpus_stats,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .crf import TrainConfig, TrainingDivergedError
from .evaluation import evaluate_bundle
from .features import (
    EmbeddingLookup,
    FeaturizerMismatchError,
    HashedFeatureEncoder,
    MissingEmbeddingError,
    EmbeddingAlignmentError,
    NnevError,
)
from .nesting import (
    ModelBundle,
    derive_seed,
    load_bundle,
    predict_nested,
    save_bundle,
    train_bundle,
    train_per_type,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_EVAL_MISMATCH = 4


@dataclass
class RunConfig:
    """Fully resolved settings for one command invocation."""

    corpus: str | None = None
    bundle: str | None = None
    out: str = "runs/latest"
    seed: int = 0
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    types: list[str] | None = None

    featurizer: str = "hashed"  # "hashed" | "embeddings"
    embeddings: str | None = None
    hashed_dim: int = 2**18
    hashed_window: int = 2

    learning_rate: float = 2e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    epochs: int = 15
    configs: str | None = None  # path to tuned per-type TrainConfigs
    n_jobs: int = 1

    tune_budget: int = 30
    tune_init: int = 5
    tune_mode: str = "per-type"  # "per-type" | "global"
    lr_bounds: tuple[float, float] = (1e-6, 1e-4)
    batch_bounds: tuple[int, int] = (2, 32)
    wd_bounds: tuple[float, float] = (0.0, 0.3)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "bundle": self.bundle,
            "out": self.out,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "types": self.types,
            "featurizer": self.featurizer,
            "embeddings": self.embeddings,
            "hashed_dim": self.hashed_dim,
            "hashed_window": self.hashed_window,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "configs": self.configs,
            "n_jobs": self.n_jobs,
            "tune_budget": self.tune_budget,
            "tune_init": self.tune_init,
            "tune_mode": self.tune_mode,
            "lr_bounds": list(self.lr_bounds),
            "batch_bounds": list(self.batch_bounds),
            "wd_bounds": list(self.wd_bounds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config field {key!r}")
            if key in ("ratios", "lr_bounds", "batch_bounds", "wd_bounds"):
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg


def load_config(path: str | Path) -> RunConfig:
    """Read a config file; a run manifest (with a 'config' key) also works."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    return RunConfig.from_dict(data)


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    mapping = {
        "corpus": "corpus", "bundle": "bundle", "out": "out", "seed": "seed",
        "embeddings": "embeddings", "hashed_dim": "hashed_dim",
        "learning_rate": "learning_rate", "batch_size": "batch_size",
        "weight_decay": "weight_decay", "epochs": "epochs",
        "configs": "configs", "n_jobs": "n_jobs",
        "budget": "tune_budget", "init": "tune_init", "mode": "tune_mode",
    }
    for flag, attr in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "types", None):
        cfg.types = [t.strip() for t in args.types.split(",") if t.strip()]
    if getattr(args, "embeddings", None):
        cfg.featurizer = "embeddings"
    if getattr(args, "hashed_dim", None) and getattr(args, "embeddings", None):
        raise ValueError("choose exactly one featurizer: --embeddings or --hashed-dim")
    if getattr(args, "ratios", None):
        parts = [float(x) for x in args.ratios.split(",")]
        if len(parts) != 3:
            raise ValueError("--ratios needs three comma-separated fractions")
        cfg.ratios = (parts[0], parts[1], parts[2])
    return cfg


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return _apply_flags(cfg, args)


def _make_featurizer(cfg: RunConfig, corpus: Sequence[Sentence]):
    if cfg.featurizer == "embeddings":
        if not cfg.embeddings:
            raise ValueError("featurizer 'embeddings' needs an embeddings path")
        return EmbeddingLookup.from_file(cfg.embeddings, corpus)
    if cfg.featurizer == "hashed":
        return HashedFeatureEncoder(dim=cfg.hashed_dim, window=cfg.hashed_window)
    raise ValueError(f"unknown featurizer {cfg.featurizer!r}")


def _write_manifest(cfg: RunConfig, command: str) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": cfg.to_dict()}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_corpus(cfg: RunConfig) -> list[Sentence]:
    if not cfg.corpus:
        raise ValueError("no corpus path given (--corpus or config)")
    return read_corpus(cfg.corpus)


def _resolved_types(cfg: RunConfig, corpus: Sequence[Sentence]) -> list[str]:
    types = cfg.types or corpus_entity_types(corpus)
    if not types:
        raise ValueError("corpus contains no entity annotations and no --types given")
    return types


def _base_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        seed=cfg.seed,
    )


def _load_tuned_configs(path: str, types: Sequence[str], base: TrainConfig):
    """Tuned config file: {type: cfg} with optional '*' broadcast entry."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "*" in data:
        star = TrainConfig.from_dict(data["*"])
        return {
            etype: replace(star, seed=derive_seed(star.seed, etype)) for etype in types
        }
    out = {}
    for etype in types:
        if etype in data:
            out[etype] = TrainConfig.from_dict(data[etype])
        else:
            out[etype] = replace(base, seed=derive_seed(base.seed, etype))
    return out


def cmd_stats(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    splits = split_corpus(corpus, cfg.ratios, cfg.seed)
    stats = corpus_stats(corpus, splits)
    print_fn(f"Sentences {stats.n_sentences:,}")
    if stats.split_sentences:
        tr, va, te = stats.split_sentences
        print_fn(f"Split sizes (train/val/test) {tr:,} / {va:,} / {te:,}")
    print_fn("")
    header = (
        f"{'Entity Type':<24} {'Total':>7} {'Nested':>7} {'Nested %':>9} "
        f"{'Train':>7} {'Val':>6} {'Test':>6}"
    )
    print_fn(header)
    print_fn("-" * len(header))
    rows = sorted(stats.per_type.items(), key=lambda kv: (-kv[1].total, kv[0]))
    for etype, row in rows:
        print_fn(
            f"{etype:<24} {row.total:>7} {row.nested:>7} {row.nested_pct:>8.2f}% "
            f"{row.train:>7} {row.val:>6} {row.test:>6}"
        )
    return EXIT_OK


def cmd_split(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    train, val, test = split_corpus(corpus, cfg.ratios, cfg.seed)
    out = Path(cfg.out)
    _write_manifest(cfg, "split")
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_corpus(part, out / f"{name}.jsonl")
        print_fn(f"{name}: {len(part)} sentences -> {out / f'{name}.jsonl'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    train, val, _ = split_corpus(corpus, cfg.ratios, cfg.seed)
    types = _resolved_types(cfg, corpus)
    featurizer = _make_featurizer(cfg, corpus)
    features = featurizer.transform(train + val)
    base = _base_train_config(cfg)
    if cfg.configs:
        cfgs = _load_tuned_configs(cfg.configs, types, base)
    else:
        cfgs = {
            etype: replace(base, seed=derive_seed(cfg.seed, etype)) for etype in types
        }
    _write_manifest(cfg, "train")
    bundle = train_bundle(
        train, val, types, features, cfgs,
        featurizer=featurizer.spec, n_jobs=cfg.n_jobs,
    )
    bundle_dir = Path(cfg.out) / "bundle"
    save_bundle(bundle, bundle_dir)
    for etype in types:
        report = bundle.reports[etype]
        print_fn(
            f"{etype}: best epoch {report.best_epoch + 1}/{cfg.epochs}, "
            f"val span F1 {report.epoch_val_f1[report.best_epoch]:.4f}"
        )
    print_fn(f"bundle written to {bundle_dir}")
    return EXIT_OK


def _tuning_space(cfg: RunConfig) -> HyperSpace:
    return HyperSpace(
        lr_bounds=cfg.lr_bounds,
        batch_bounds=cfg.batch_bounds,
        wd_bounds=cfg.wd_bounds,
    )


def _log_records(
    history: Sequence[Trial], seconds: Sequence[float], etype: str | None
) -> list[dict]:
    records = []
    for i, (trial, secs) in enumerate(zip(history, seconds)):
        records.append({
            "trial": i,
            "entity_type": etype,
            "learning_rate": trial.point.learning_rate,
            "batch_size": trial.point.batch_size,
            "weight_decay": trial.point.weight_decay,
            "u": [float(x) for x in trial.u],
            "f1": trial.f,
            "seconds": secs,
            "failed": trial.failed,
        })
    return records


def cmd_tune(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    train, val, _ = split_corpus(corpus, cfg.ratios, cfg.seed)
    types = _resolved_types(cfg, corpus)
    featurizer = _make_featurizer(cfg, corpus)
    features = featurizer.transform(train + val)
    space = _tuning_space(cfg)
    out = Path(cfg.out)
    _write_manifest(cfg, "tune")

    all_records: list[dict] = []
    tuned: dict[str, dict] = {}

    def timed(objective):
        seconds: list[float] = []

        def wrapped(point: HyperPoint) -> float:
            t0 = time.perf_counter()
            try:
                return objective(point)
            finally:
                seconds.append(time.perf_counter() - t0)

        return wrapped, seconds

    if cfg.tune_mode == "per-type":
        for etype in types:
            type_seed = derive_seed(cfg.seed, etype)

            def objective(point: HyperPoint, etype=etype, type_seed=type_seed) -> float:
                train_cfg = TrainConfig(
                    learning_rate=point.learning_rate,
                    batch_size=point.batch_size,
                    weight_decay=point.weight_decay,
                    epochs=cfg.epochs,
                    seed=type_seed,
                )
                _, report = train_per_type(train, val, etype, features, train_cfg)
                return report.epoch_val_f1[report.best_epoch]

            wrapped, seconds = timed(objective)
            best, history = tune(
                wrapped, space, budget=cfg.tune_budget, init=cfg.tune_init,
                seed=type_seed,
            )
            all_records.extend(_log_records(history, seconds, etype))
            tuned[etype] = TrainConfig(
                learning_rate=best.point.learning_rate,
                batch_size=best.point.batch_size,
                weight_decay=best.point.weight_decay,
                epochs=cfg.epochs,
                seed=type_seed,
            ).to_dict()
            print_fn(f"{etype}: best val span F1 {best.f:.4f} at {best.point}")
    elif cfg.tune_mode == "global":

        def objective(point: HyperPoint) -> float:
            shared = TrainConfig(
                learning_rate=point.learning_rate,
                batch_size=point.batch_size,
                weight_decay=point.weight_decay,
                epochs=cfg.epochs,
                seed=cfg.seed,
            )
            bundle = train_bundle(
                train, val, types, features, shared,
                featurizer=featurizer.spec, n_jobs=cfg.n_jobs,
            )
            report = evaluate_bundle(bundle, val, features)
            return report.micro_span.f1

        wrapped, seconds = timed(objective)
        best, history = tune(
            wrapped, space, budget=cfg.tune_budget, init=cfg.tune_init, seed=cfg.seed
        )
        all_records.extend(_log_records(history, seconds, None))
        tuned["*"] = TrainConfig(
            learning_rate=best.point.learning_rate,
            batch_size=best.point.batch_size,
            weight_decay=best.point.weight_decay,
            epochs=cfg.epochs,
            seed=cfg.seed,
        ).to_dict()
        print_fn(f"best micro val span F1 {best.f:.4f} at {best.point}")
    else:
        raise ValueError(f"unknown tune mode {cfg.tune_mode!r}")

    with open(out / "tuning_log.jsonl", "w", encoding="utf-8") as fh:
        for record in all_records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
    with open(out / "tuned_configs.json", "w", encoding="utf-8") as fh:
        json.dump(tuned, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print_fn(f"tuning log and configs written to {out}")
    return EXIT_OK


def _load_bundle_for(cfg: RunConfig) -> ModelBundle:
    if not cfg.bundle:
        raise ValueError("no bundle directory given (--bundle or config)")
    return load_bundle(cfg.bundle)


def cmd_predict(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    bundle = _load_bundle_for(cfg)
    featurizer = _make_featurizer(cfg, corpus)
    if featurizer.spec != bundle.featurizer:
        raise FeaturizerMismatchError(
            f"configured featurizer {featurizer.spec} does not match the "
            f"bundle's {bundle.featurizer}"
        )
    features = featurizer.transform(corpus)
    out = Path(cfg.out)
    _write_manifest(cfg, "predict")
    predictions = []
    for sentence in corpus:
        spans = predict_nested(bundle, sentence, features[sentence.id])
        predictions.append(Sentence(sentence.id, sentence.tokens, spans))
    write_corpus(predictions, out / "predictions.jsonl")
    print_fn(f"predictions written to {out / 'predictions.jsonl'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, print_fn=print) -> int:
    corpus = _require_corpus(cfg)
    bundle = _load_bundle_for(cfg)
    featurizer = _make_featurizer(cfg, corpus)
    if featurizer.spec != bundle.featurizer:
        raise FeaturizerMismatchError(
            f"configured featurizer {featurizer.spec} does not match the "
            f"bundle's {bundle.featurizer}"
        )
    features = featurizer.transform(corpus)
    out = Path(cfg.out)
    _write_manifest(cfg, "eval")
    report = evaluate_bundle(bundle, corpus, features)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print_fn(report.render())
    print_fn(f"report written to {out / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestner",
        description="Nested NER: per-type CRF training, tuning and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--corpus", help="corpus file in the JSON-lines span format")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--types", help="comma-separated entity types to include")
        p.add_argument("--embeddings", help="NNEV embedding file (dense featurizer)")
        p.add_argument("--hashed-dim", type=int, dest="hashed_dim",
                       help="hashed featurizer dimension (power of two)")
        p.add_argument("--ratios", help="train,val,test fractions (default 0.7,0.15,0.15)")

    p = sub.add_parser("stats", help="corpus statistics (totals, nesting, splits)")
    common(p)

    p = sub.add_parser("split", help="write train/val/test corpus files")
    common(p)

    p = sub.add_parser("train", help="train one CRF per entity type")
    common(p)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--epochs", type=int)
    p.add_argument("--configs", help="tuned per-type TrainConfig JSON (from tune)")
    p.add_argument("--n-jobs", type=int, dest="n_jobs")

    p = sub.add_parser("tune", help="Bayesian optimization of hyperparameters")
    common(p)
    p.add_argument("--budget", type=int, help="total objective evaluations")
    p.add_argument("--init", type=int, help="initial Latin-hypercube design size")
    p.add_argument("--mode", choices=("per-type", "global"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-jobs", type=int, dest="n_jobs")

    p = sub.add_parser("predict", help="write predictions in the corpus format")
    common(p)
    p.add_argument("--bundle", help="trained bundle directory")

    p = sub.add_parser("eval", help="score a bundle against gold annotations")
    common(p)
    p.add_argument("--bundle", help="trained bundle directory")

    return parser


COMMANDS = {
    "stats": cmd_stats,
    "split": cmd_split,
    "train": cmd_train,
    "tune": cmd_tune,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FeaturizerMismatchError, MissingEmbeddingError, EmbeddingAlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL_MISMATCH
    except (CorpusParseError, SpanValidationError, NnevError, ValueError, KeyError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
