"""Command-line entry point.

Subcommands: generate (synthetic dataset), train (one variant under one
regime), evaluate (checkpoints vs a named baseline), sweep (variant x
personalized-fraction grid), rescore (score one n-best file for piping).

One flat `key = value` config file drives everything; `#` starts a
comment, unknown keys are rejected, and the resolved config is echoed
into every output directory.  All commands are reproducible from
(config, seed) alone: two runs with the same inputs write byte-identical
files.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from .corpus import (
    CorpusError,
    FirstPassSimConfig,
    GeneratorConfig,
    SPLIT_NAMES,
    EntityCatalog,
    generate_corpus,
    load_dataset,
    read_nbest_jsonl,
    save_dataset,
)
from .evaluation import (
    SelectionMode,
    corpus_wer,
    evaluate_scorer,
    run_experiment_grid,
)
from .nnet import (
    ModelConfig,
    ScoringVariant,
    VariantScorer,
    build_model,
    fuse,
    load_checkpoint,
    promote_model,
    save_checkpoint,
)
from .textproc import PromptTemplate
from .training import Regime, TrainConfig, TrainData, check_regime, train


class ValidationError(ValueError):
    """Bad command line or config input (exit code 1)."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved flat configuration for one run."""

    seed: int = 0
    data_dir: str = "data"
    # corpus generator
    n_train_personalized: int = 2000
    n_train_general: int = 2000
    n_valid_personalized: int = 400
    n_test_personalized: int = 500
    n_test_general: int = 500
    catalog_size: int = 20
    catalog_cap: int = 2000
    vocab_max_size: int = 2048
    personalized_templates_path: str = ""
    general_templates_path: str = ""
    entity_pool_path: str = ""
    # simulated first pass
    gamma: float = 1.0
    epsilon_sf: float = 0.3
    length_penalty: float = 0.1
    confusion_rate: float = 0.3
    homophone_rate: float = 0.6
    n_best_size: int = 8
    reference_prob: float = 0.9
    noise_sigma: float = 0.4
    # model
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    intermediate_size: int = 128
    dropout_rate: float = 0.1
    max_positions: int = 64
    # training
    alpha: float = 20.0
    beta: float = 1.0
    batch_size: int = 16
    initial_lr: float = 1e-3
    lr_decay: float = 0.95
    max_epochs: int = 20
    patience: int = 3
    personalized_fraction: float = 0.0
    # prompt template
    prompt_prefix: str = "as i need to contact"
    prompt_joiner: str = "and"
    # sweep
    sweep_variants: tuple[str, ...] = ("early", "prompt", "xattn")
    sweep_fractions: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)

    def first_pass_config(self) -> FirstPassSimConfig:
        return FirstPassSimConfig(
            gamma=self.gamma,
            epsilon_sf=self.epsilon_sf,
            length_penalty=self.length_penalty,
            confusion_rate=self.confusion_rate,
            homophone_rate=self.homophone_rate,
            n_best_size=self.n_best_size,
            seed=self.seed,
            reference_prob=self.reference_prob,
            noise_sigma=self.noise_sigma,
        )

    def generator_config(self) -> GeneratorConfig:
        kw: dict = {}
        if self.personalized_templates_path:
            kw["personalized_templates"] = _read_lines(self.personalized_templates_path)
        if self.general_templates_path:
            kw["general_templates"] = _read_lines(self.general_templates_path)
        if self.entity_pool_path:
            kw["entity_pool"] = _read_lines(self.entity_pool_path)
        return GeneratorConfig(
            n_train_personalized=self.n_train_personalized,
            n_train_general=self.n_train_general,
            n_valid_personalized=self.n_valid_personalized,
            n_test_personalized=self.n_test_personalized,
            n_test_general=self.n_test_general,
            catalog_size=self.catalog_size,
            catalog_cap=self.catalog_cap,
            vocab_max_size=self.vocab_max_size,
            seed=self.seed,
            first_pass=self.first_pass_config(),
            **kw,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            intermediate_size=self.intermediate_size,
            dropout_rate=self.dropout_rate,
            max_positions=self.max_positions,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            beta=self.beta,
            batch_size=self.batch_size,
            initial_lr=self.initial_lr,
            lr_decay=self.lr_decay,
            max_epochs=self.max_epochs,
            patience=self.patience,
            personalized_fraction=self.personalized_fraction,
            seed=self.seed,
        )

    def prompt_template(self) -> PromptTemplate:
        prefix = tuple(self.prompt_prefix.lower().split())
        return PromptTemplate(prefix=prefix, joiner=self.prompt_joiner.lower())

    def echo(self) -> str:
        """Canonical `key = value` rendering of the resolved config."""
        lines = []
        for key in sorted(_SCHEMA):
            value = getattr(self, _SCHEMA[key][0])
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def _read_lines(path: str) -> tuple[str, ...]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"file not found: {path}")
    return tuple(
        line.strip() for line in p.read_text(encoding="utf-8").splitlines() if line.strip()
    )


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x.strip()) for x in text.split(",") if x.strip())


# config key -> (RunConfig attribute, value parser)
_SCHEMA = {
    "seed": ("seed", _parse_int),
    "data_dir": ("data_dir", _parse_str),
    "n_train_personalized": ("n_train_personalized", _parse_int),
    "n_train_general": ("n_train_general", _parse_int),
    "n_valid_personalized": ("n_valid_personalized", _parse_int),
    "n_test_personalized": ("n_test_personalized", _parse_int),
    "n_test_general": ("n_test_general", _parse_int),
    "catalog_size": ("catalog_size", _parse_int),
    "catalog_cap": ("catalog_cap", _parse_int),
    "vocab_max_size": ("vocab_max_size", _parse_int),
    "personalized_templates_path": ("personalized_templates_path", _parse_str),
    "general_templates_path": ("general_templates_path", _parse_str),
    "entity_pool_path": ("entity_pool_path", _parse_str),
    "gamma": ("gamma", _parse_float),
    "epsilon_sf": ("epsilon_sf", _parse_float),
    "length_penalty": ("length_penalty", _parse_float),
    "confusion_rate": ("confusion_rate", _parse_float),
    "homophone_rate": ("homophone_rate", _parse_float),
    "n_best_size": ("n_best_size", _parse_int),
    "reference_prob": ("reference_prob", _parse_float),
    "noise_sigma": ("noise_sigma", _parse_float),
    "hidden_size": ("hidden_size", _parse_int),
    "num_layers": ("num_layers", _parse_int),
    "num_heads": ("num_heads", _parse_int),
    "intermediate_size": ("intermediate_size", _parse_int),
    "dropout_rate": ("dropout_rate", _parse_float),
    "max_positions": ("max_positions", _parse_int),
    "alpha": ("alpha", _parse_float),
    "beta": ("beta", _parse_float),
    "batch_size": ("batch_size", _parse_int),
    "initial_lr": ("initial_lr", _parse_float),
    "lr_decay": ("lr_decay", _parse_float),
    "max_epochs": ("max_epochs", _parse_int),
    "patience": ("patience", _parse_int),
    "personalized_fraction": ("personalized_fraction", _parse_float),
    "prompt.prefix": ("prompt_prefix", _parse_str),
    "prompt.joiner": ("prompt_joiner", _parse_str),
    "sweep_variants": ("sweep_variants", _parse_str_list),
    "sweep_fractions": ("sweep_fractions", _parse_float_list),
}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ValidationError(f"{source}: line {lineno}: unknown config key: {key}")
        attr, parse = _SCHEMA[key]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ValidationError(
                f"{source}: line {lineno}: bad value for {key}: {value!r}"
            ) from exc
    return RunConfig(**values)


def load_run_config(path: str, seed_override: int | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    cfg = parse_config_text(p.read_text(encoding="utf-8"), source=p.name)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    return cfg


def _write_echo(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / "config.txt").write_text(cfg.echo(), encoding="utf-8")


def _jsonl_bytes(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.generator_config())
    save_dataset(out_dir, corpus)
    _write_echo(out_dir, cfg)
    print(f"vocabulary: {len(corpus.vocab)} tokens")
    for split in SPLIT_NAMES:
        lists = corpus.splits.get(split, [])
        pers = sum(1 for nb in lists if nb.is_personalized)
        print(f"split {split}: {len(lists)} utterances ({pers} personalized)")
    return 0


def _load_bundle(cfg: RunConfig):
    data_dir = Path(cfg.data_dir)
    if not data_dir.exists():
        raise ValidationError(f"data directory not found: {data_dir}")
    return load_dataset(data_dir)


def _check_vocab(model, vocab, path: str) -> None:
    if model.config.vocab_size != len(vocab):
        raise ValidationError(f"{path}: config mismatch between checkpoint and vocab")


def _history_text(history) -> str:
    lines = ["epoch\tlr\ttrain_loss\tvalid_wer"]
    for h in history:
        lines.append(f"{h.epoch}\t{h.lr!r}\t{h.train_loss!r}\t{h.valid_wer!r}")
    return "\n".join(lines) + "\n"


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    variant = _parse_variant(args.variant)
    regime = _parse_regime(args.regime)
    check_regime(variant, regime)
    data = _load_bundle(cfg)
    model_cfg = cfg.model_config(len(data.vocab))
    if args.baseline:
        base = load_checkpoint(args.baseline, expected_config=model_cfg)
        model = promote_model(base, variant, cfg.seed)
    else:
        model = build_model(model_cfg, variant, cfg.seed)
    bundle = TrainData(
        train=data.splits.get("train", []),
        valid=data.splits.get("valid_personalized", []),
        catalogs=data.catalogs,
        vocab=data.vocab,
        template=cfg.prompt_template(),
    )
    result = train(model, regime, bundle, cfg.train_config())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt", result.model)
    (out_dir / "history.txt").write_text(_history_text(result.history), encoding="utf-8")
    _write_echo(out_dir, cfg)
    print(
        f"trained {variant.value}/{regime.value}: best epoch {result.best_epoch}, "
        f"best validation WER {result.best_valid_wer:.4f}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    data = _load_bundle(cfg)
    template = cfg.prompt_template()
    test_splits = {
        name: data.splits[name]
        for name in ("test_personalized", "test_general")
        if data.splits.get(name)
    }
    if not test_splits:
        raise ValidationError("dataset has no test splits")

    baseline_wers = None
    baseline_name = None
    if args.baseline:
        if not Path(args.baseline).exists():
            raise ValidationError(f"checkpoint not found: {args.baseline}")
        base_model = load_checkpoint(args.baseline)
        _check_vocab(base_model, data.vocab, args.baseline)
        base_scorer = VariantScorer(base_model, data.vocab, template)
        baseline_wers = {
            split: corpus_wer(
                test_splits[split], data.catalogs, base_scorer,
                SelectionMode.RESCORED, cfg.alpha, cfg.beta,
            )
            for split in test_splits
        }
        baseline_name = Path(args.baseline).name

    rows = []
    for ckpt in args.checkpoints:
        if not Path(ckpt).exists():
            raise ValidationError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        _check_vocab(model, data.vocab, ckpt)
        scorer = VariantScorer(model, data.vocab, template)
        report = evaluate_scorer(
            test_splits,
            data.catalogs,
            scorer,
            alpha=cfg.alpha,
            beta=cfg.beta,
            system=Path(ckpt).name,
            baseline=baseline_name,
            baseline_wers=baseline_wers,
        )
        print(report.format_table())
        print()
        rows.extend(report.rows())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.jsonl").write_text(_jsonl_bytes(rows), encoding="utf-8")
    _write_echo(out_dir, cfg)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    if not cfg.sweep_variants:
        raise ValidationError("no variants")
    for name in cfg.sweep_variants:
        _parse_variant(name)
    data = _load_bundle(cfg)
    rows = run_experiment_grid(
        data.splits,
        data.catalogs,
        data.vocab,
        cfg.sweep_variants,
        cfg.sweep_fractions,
        cfg.model_config(len(data.vocab)),
        cfg.train_config(),
        template=cfg.prompt_template(),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.jsonl").write_text(
        _jsonl_bytes([r.to_obj() for r in rows]), encoding="utf-8"
    )
    _write_echo(out_dir, cfg)
    print(f"{'variant':<10} {'fraction':>8} {'split':<20} {'WER':>8} {'WERR':>8}")
    for r in rows:
        print(
            f"{r.variant:<10} {r.fraction:8.2f} {r.split:<20} "
            f"{100 * r.wer:8.2f} {100 * r.werr_vs_baseline:+7.1f}%"
        )
    return 0


def cmd_rescore(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    data = _load_bundle(cfg)
    if not Path(args.checkpoint).exists():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.nbest).exists():
        raise ValidationError(f"n-best file not found: {args.nbest}")
    model = load_checkpoint(args.checkpoint)
    _check_vocab(model, data.vocab, args.checkpoint)
    scorer = VariantScorer(model, data.vocab, cfg.prompt_template())
    lists, _ = read_nbest_jsonl(args.nbest, data.vocab)
    out_rows = []
    for nbest in lists:
        catalog = data.catalogs.get(nbest.utterance_id)
        if catalog is None and scorer.needs_catalog():
            catalog = EntityCatalog(nbest.utterance_id, [])
        s = scorer.score_nbest(nbest, catalog)
        v = [
            fuse(h.first_pass_score, si, cfg.alpha, cfg.beta)
            for h, si in zip(nbest.hypotheses, s)
        ]
        idx = min(range(len(v)), key=v.__getitem__)
        out_rows.append(
            {
                "utterance_id": nbest.utterance_id,
                "chosen_index": idx,
                "text": nbest.hypotheses[idx].text,
                "u": nbest.hypotheses[idx].first_pass_score,
                "s": s[idx],
                "v": v[idx],
            }
        )
    text = _jsonl_bytes(out_rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _parse_variant(name: str) -> ScoringVariant:
    try:
        return ScoringVariant(name)
    except ValueError:
        choices = ", ".join(v.value for v in ScoringVariant)
        raise ValidationError(f"unknown variant {name!r} (choose from: {choices})") from None


def _parse_regime(name: str) -> Regime:
    try:
        return Regime(name)
    except ValueError:
        choices = ", ".join(r.value for r in Regime)
        raise ValidationError(f"unknown regime {name!r} (choose from: {choices})") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are validation errors
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rescorekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant under one regime")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--regime", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--baseline", default=None, help="baseline checkpoint to initialize from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate checkpoints on the test splits")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--baseline", default=None, help="baseline checkpoint for WERR")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="variant x personalized-fraction grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rescore", help="rescore one n-best file (jsonl to stdout)")
    p.add_argument("checkpoint")
    p.add_argument("nbest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_rescore)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
