"""``cmf``: synthesise data, train, evaluate, ablate and gradient-check.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 data or I/O error, 4 numerical failure or corrupted checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ablation
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetError, DatasetSplit, SyntheticSpec, load_dataset, save_dataset, synthesize_splits
from .gradcheck import check_model
from .metrics import format_table
from .model import CMRobertaModel, ModelConfig, tiny_config
from .tensor import NumericalError
from .train import ConfigError, TrainConfig, evaluate, evaluate_split, fit

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULT_SPLITS = {"train": 200, "val": 50, "test": 50}


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything one run needs. Model input widths default to the dataset's."""

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, str] = field(default_factory=dict)
    variant: str = "full"
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: list(ablation.DEFAULT_SEEDS))

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        extra = set(d) - {"model", "train", "data", "variant", "out", "seeds"}
        if extra:
            raise ConfigError(f"unknown run config keys: {sorted(extra)}")
        data = {k: str(v) for k, v in (d.get("data") or {}).items()}
        if base is not None:
            data = {k: str(base / v) if not Path(v).is_absolute() else v for k, v in data.items()}
        unknown = set(data) - {"train", "val", "test"}
        if unknown:
            raise ConfigError(f"unknown data split names {sorted(unknown)}")
        variant = d.get("variant", "full")
        if variant not in ablation.VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        try:
            train = TrainConfig.from_dict(d.get("train") or {})
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cls(dict(d.get("model") or {}), train, data, variant, str(d.get("out", "runs")),
                   [int(s) for s in d.get("seeds", ablation.DEFAULT_SEEDS)])

    def model_config(self, split: DatasetSplit, seed: int | None = None) -> ModelConfig:
        m = dict(self.model)
        for key, have in (("d_audio_in", split.d_audio_in), ("d_text_in", split.d_text_in),
                          ("n_classes", split.n_classes)):
            want = m.setdefault(key, have)
            if want != have:
                raise DatasetError(f"config {key} = {want} but dataset has {key} = {have}")
        if seed is not None:
            m["seed"] = seed
        return ablation.VARIANTS[self.variant].apply(ModelConfig.from_dict(m))


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return d


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(_read_json(path), Path(path).resolve().parent)


def _load_split(cfg: RunConfig, name: str, override: str | None = None) -> DatasetSplit:
    path = override or cfg.data.get(name)
    if path is None:
        raise ConfigError(f"no {name} dataset configured")
    if not Path(path).exists():
        raise DatasetError(f"{name} dataset not found: {path}")
    return load_dataset(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec_dict = _read_json(args.config) if args.config else {}
    counts = spec_dict.pop("splits", DEFAULT_SPLITS)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synthetic spec: {e}") from e
    if not isinstance(counts, dict) or not counts or any(int(n) < 1 for n in counts.values()):
        raise ConfigError("splits must map split names to positive dialogue counts")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        splits = synthesize_splits(spec, {k: int(v) for k, v in counts.items()})
        for name, split in splits.items():
            save_dataset(split, out / f"{name}.jsonl")
    except OSError as e:
        raise DatasetError(f"cannot write to {out}: {e.strerror}") from e
    for name, split in splits.items():
        freq = np.bincount(split.labels(), minlength=split.n_classes)
        dist = " ".join(f"{lab}={n}" for lab, n in zip(split.label_names, freq))
        print(f"{name}: {len(split.dialogues)} dialogues, {split.n_utterances} utterances; {dist}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    out = Path(args.out or cfg.out)
    train = _load_split(cfg, "train", args.data)
    val = _load_split(cfg, "val")
    test = _load_split(cfg, "test") if "test" in cfg.data else None
    model_cfg = cfg.model_config(train, seed=cfg.train.seed)
    for other in (val, test):
        if other is not None:
            cfg.model_config(other)
    model = CMRobertaModel(model_cfg)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    result = fit(model, train, val, cfg.train, log=log)
    rep = result.report
    val_loss, val_report = evaluate_split(model, val, cfg.train.batch_size)
    summary = {"train": rep.to_dict(), "model_config": model_cfg.to_dict(),
               "train_config": cfg.train.to_dict(), "validation": val_report.to_dict(),
               "validation_loss": val_loss}
    if test is not None:
        summary["test"] = evaluate(model, test, cfg.train.batch_size).to_dict()
    ckpt = Checkpoint(model_cfg, model.state_dict(), result.adam, cfg.train.to_dict(),
                      {"best_epoch": rep.best_epoch, "stop_epoch": rep.stop_epoch,
                       "epochs": rep.epochs, "stop_reason": rep.stop_reason})
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.cmf", ckpt)
        _write_json(out / "train_report.json", summary)
    except OSError as e:
        raise DatasetError(f"cannot write to {out}: {e.strerror}") from e
    if args.format == "json":
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"epochs {rep.epochs} (best {rep.best_epoch}, stopped: {rep.stop_reason})")
        print(format_table([("validation", val_report)]))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise DatasetError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_run_config(args.config)
    split = _load_split(cfg, "test", args.data)
    mc = ckpt.model_config
    for key, want, have in (("d_audio_in", mc.d_audio_in, split.d_audio_in),
                            ("d_text_in", mc.d_text_in, split.d_text_in),
                            ("n_classes", mc.n_classes, split.n_classes)):
        if want != have:
            raise DatasetError(f"checkpoint expects {key} = {want} but dataset has {key} = {have}")
    report = evaluate(ckpt.build_model(), split)
    if args.out:
        _write_json(Path(args.out) / "eval_report.json", report.to_dict())
    if args.format == "json":
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(format_table([("model", report)]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    try:
        variants = ablation.parse_variants(args.variants or "full,no-sca")
    except KeyError as e:
        raise UsageError(e.args[0]) from e
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    train, val, test = (_load_split(cfg, n) for n in ("train", "val", "test"))
    base = replace(cfg, variant="full").model_config(train)
    results = ablation.run_ablation(variants, base, cfg.train, train, val, test, seeds)
    payload = {"seeds": seeds, "variants": [r.to_dict() for r in results]}
    if args.out:
        _write_json(Path(args.out) / "ablation.json", payload)
    print(json.dumps(payload, sort_keys=True) if args.format == "json" else ablation.format_ablation(results))
    return EXIT_OK


def gradcheck_config(cfg: RunConfig, seed: int) -> ModelConfig:
    """The configured architecture shrunk to finite-difference size (d_model <= 8)."""
    m = {k: v for k, v in cfg.model.items()
         if k in ("n_sca_layers", "share_encoders", "streams", "n_classes")}
    return tiny_config(**m, seed=seed, d_model=min(int(cfg.model.get("d_model", 8)), 8))


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else 0
    # a failing scan stops at the first entry over tolerance
    check = check_model(gradcheck_config(cfg, seed), seed=seed, steps=3, stop_above=1e-4)
    info = check.to_dict()
    if args.format == "json":
        print(json.dumps(info, sort_keys=True))
    else:
        status = "PASS" if check.passed() else "FAIL"
        scope = "" if info["complete"] else f" (stopped after {info['n_checked']} entries)"
        print(f"{status} max relative error {info['max_rel_error']:.3e} "
              f"(worst {info['worst_parameter']}{info['worst_index']}) over {check.n_parameters} "
              f"entries in {info['seconds']:.1f}s{scope}")
    return EXIT_OK if check.passed() else EXIT_CHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "write synthetic train/val/test dialogue files",
             "train": "train a model and write a checkpoint and report",
             "eval": "score a checkpoint on a dataset",
             "ablate": "compare ablation variants over several seeds",
             "gradcheck": "finite-difference check of the full network"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config (run config; synthetic spec for synth)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("json", "table"), default="table")
        if name in ("train", "eval"):
            p.add_argument("--data", help="dataset file overriding the config")
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "ablate":
            p.add_argument("--variants", help="comma-separated ids: " + ",".join(ablation.VARIANTS))
        if name == "train":
            p.add_argument("--verbose", action="store_true", help="log every epoch to stderr")
        if name == "synth":
            p.set_defaults(out=".")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"cmf: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, NumericalError) as e:
        print(f"cmf: error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetError as e:
        print(f"cmf: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"cmf: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"cmf: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
