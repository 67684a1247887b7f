"""Command-line entry point: ``run``, ``sweep``, and ``verify`` subcommands.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, with_value
from .datasets import (
    IMAGE_CLASS,
    Dataset,
    load_idx,
    markov_transitions,
    partition_iid,
    partition_noniid,
    synth_images,
    synth_sequences,
    synth_teacher,
)
from .errors import ConfigError
from .federation import FederatedTrainer
from .metrics import emit_reports, save_ratio
from .nn import MLP, RNN, ModelSpec
from .selfcheck import run_all
from .strategies import TopKConfig
from .wire import dense_message_bytes

_TAG_DATA = 17


def _data_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TAG_DATA]))


def _split(dataset: Dataset, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    train = Dataset(
        dataset.inputs[:n_train], dataset.labels[:n_train], dataset.kind, dataset.n_classes
    )
    test = Dataset(
        dataset.inputs[n_train:n_train + n_test],
        dataset.labels[n_train:n_train + n_test],
        dataset.kind,
        dataset.n_classes,
    )
    return train, test


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset, ModelSpec]:
    """Materialize (train, test, model spec) for the configured dataset."""
    rng = _data_rng(cfg.seed)
    n = cfg.n_train + cfg.n_test
    if cfg.dataset == "synth_images":
        images, labels = synth_images(n, rng)
        flat = images.reshape(n, -1).astype(np.float64) / 255.0
        train, test = _split(Dataset(flat, labels, IMAGE_CLASS, 10), cfg.n_train, cfg.n_test)
        spec = ModelSpec(MLP, cfg.n_layers, flat.shape[1], cfg.hidden_dim, 10)
    elif cfg.dataset == "mnist":
        full_train = load_idx(cfg.mnist_images, cfg.mnist_labels)
        full_test = load_idx(cfg.mnist_test_images, cfg.mnist_test_labels)
        tr_idx = np.sort(rng.permutation(len(full_train))[: cfg.n_train])
        te_idx = np.sort(rng.permutation(len(full_test))[: cfg.n_test])
        train = Dataset(
            full_train.inputs[tr_idx], full_train.labels[tr_idx], IMAGE_CLASS,
            full_train.n_classes,
        )
        test = Dataset(
            full_test.inputs[te_idx], full_test.labels[te_idx], IMAGE_CLASS,
            full_train.n_classes,
        )
        spec = ModelSpec(MLP, cfg.n_layers, train.inputs.shape[1], cfg.hidden_dim,
                         train.n_classes)
    elif cfg.dataset == "teacher":
        spec = ModelSpec(
            MLP, cfg.n_layers, cfg.teacher_in_dim, cfg.hidden_dim, cfg.teacher_out_dim,
            readout_activation="identity",
        )
        data, _teacher = synth_teacher(spec, n, cfg.noise_sd, rng)
        train, test = _split(data, cfg.n_train, cfg.n_test)
    elif cfg.dataset == "sequences":
        transitions = markov_transitions(cfg.vocab, rng)
        data = synth_sequences(cfg.vocab, cfg.seq_len, n, rng, transitions=transitions)
        train, test = _split(data, cfg.n_train, cfg.n_test)
        spec = ModelSpec(RNN, cfg.seq_len, cfg.vocab, cfg.hidden_dim, cfg.vocab)
    else:  # unreachable: parse_config validates the dataset key
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    return train, test, spec


def execute(cfg: RunConfig) -> FederatedTrainer:
    """Run one configuration end to end and write its report files."""
    train, test, spec = build_data(cfg)
    if cfg.partition == "iid":
        part = partition_iid(train, cfg.K, _data_rng(cfg.seed + 1))
    else:
        part = partition_noniid(train, cfg.K, cfg.classes_per_client, _data_rng(cfg.seed + 1))
    topk = TopKConfig(cfg.topk_fraction) if cfg.topk_fraction > 0 else None
    trainer = FederatedTrainer(
        cfg.fed_config(), spec, cfg.variational(), train, part,
        test=test, topk=topk, timing=cfg.timing_model(),
    )
    reports = trainer.run()

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.lines())
    emit_reports(reports, cfg.format, out / f"reports.{cfg.format}")
    return trainer


def _summary_line(cfg: RunConfig, trainer: FederatedTrainer) -> str:
    reports = trainer.server.reports
    if not reports:
        return "no rounds executed"
    last = reports[-1]
    ratio = save_ratio(dense_message_bytes(trainer.layout), last.up_bytes)
    return (
        f"rounds={last.round} final_top1={last.test_top1:.4f} "
        f"final_top3={last.test_top3:.4f} final_train_loss={last.train_loss:.6g} "
        f"total_up_bytes={trainer.ledger.total_up} save_ratio={ratio:.3f}x"
    )


def cmd_run(cfg: RunConfig) -> int:
    print("effective configuration:")
    print(cfg.lines(), end="")
    trainer = execute(cfg)
    print(_summary_line(cfg, trainer))
    return 0


def cmd_sweep(cfg: RunConfig, key: str, raw_values: str) -> int:
    base = getattr(cfg, key, None)
    if base is None or isinstance(base, str):
        raise ConfigError(f"sweep key must name a numeric configuration field, got '{key}'")
    caster = int if isinstance(base, int) else float
    try:
        values = [caster(v) for v in raw_values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid sweep values {raw_values!r} for key '{key}'") from exc
    if not values:
        raise ConfigError("sweep needs at least one value")

    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["key,value,final_train_loss,final_top1,final_top3,total_up_bytes,save_ratio"]
    for i, value in enumerate(values):
        derived_seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        sub = with_value(cfg, key, value)
        sub = with_value(sub, "seed", derived_seed)
        sub = with_value(sub, "out_dir", str(root / f"{key}={value}"))
        print(f"sweep {key}={value} (seed {derived_seed})")
        trainer = execute(sub)
        print(_summary_line(sub, trainer))
        last = trainer.server.reports[-1]
        ratio = save_ratio(dense_message_bytes(trainer.layout), last.up_bytes)
        rows.append(
            f"{key},{value},{last.train_loss:.17g},{last.test_top1:.17g},"
            f"{last.test_top3:.17g},{trainer.ledger.total_up},{ratio:.17g}"
        )
    (root / "sweep_summary.csv").write_text("\n".join(rows) + "\n")
    return 0


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value configuration file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--strategy")
    sub.add_argument("--p", type=float)
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--format", choices=("csv", "json"))
    sub.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any configuration key",
    )


def _overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for pair in args.set:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = args.seed
    if args.strategy is not None:
        out["strategy"] = args.strategy
    if args.p is not None:
        out["p"] = args.p
    if args.out is not None:
        out["out_dir"] = args.out
    if args.format is not None:
        out["format"] = args.format
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbiad",
        description="Federated learning with adaptive row dropout: simulator and baselines",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    run_p = subs.add_parser("run", help="train one configuration and write reports")
    _add_common_flags(run_p)
    sweep_p = subs.add_parser("sweep", help="run once per value of a numeric key")
    _add_common_flags(sweep_p)
    sweep_p.add_argument("--key", required=True)
    sweep_p.add_argument("--values", required=True, help="comma-separated numbers")
    subs.add_parser("verify", help="run the built-in property checks")

    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return 0 if run_all() else 1
        cfg = parse_config(args.config, _overrides(args))
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_sweep(cfg, args.key, args.values)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
