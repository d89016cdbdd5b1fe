"""Command-line entry points: gen-synth, train, eval, sweep.

A run is fully described by one flat JSON document (see ``RunConfig``); every
key can also be overridden on the command line as ``--key value``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from .data import SyntheticSpec, Vocab, load_jsonl, write_synthetic
from .evaluation import evaluate
from .model import GatedFusionTransformer, ModelConfig, model_from_checkpoint
from .objectives import LossWeights
from .training import TrainConfig, load_resume_state, train

log = logging.getLogger("mimmt")

SEED_ENV = "MI_MMT_SEED"
PATH_KEYS = ("train_path", "valid_path", "test_path", "src_vocab", "tgt_vocab")
SWEEP_COLUMNS = ["param", "value", "bleu", "delta_bleu", "gender_accuracy", "ambiguous_accuracy"]


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _defaults(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        out[f.name] = f.default if f.default is not MISSING else None
    return out


_MODEL_KEYS = _defaults(ModelConfig, skip=("vocab_size_src", "vocab_size_tgt", "seed"))
_TRAIN_KEYS = _defaults(TrainConfig, skip=("seed",))
_LOSS_KEYS = _defaults(LossWeights)
_RUN_DEFAULTS: dict = {
    **{k: None for k in PATH_KEYS},
    "out_dir": None,
    "seed": None,
    **_MODEL_KEYS,
    **_TRAIN_KEYS,
    **_LOSS_KEYS,
}
_FLOAT_OR_NONE = {"avg_len_s"}


class RunConfig:
    """Flat union of model, training and loss settings plus dataset paths."""

    def __init__(self, values: dict):
        unknown = set(values) - set(_RUN_DEFAULTS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        self.values = dict(_RUN_DEFAULTS)
        self.values.update(values)
        if self.values["seed"] is None:
            self.values["seed"] = int(os.environ.get(SEED_ENV, 0))
        for key in ("train_config", "loss_weights"):
            try:
                getattr(self, key)()
            except (ValueError, TypeError) as exc:
                raise ConfigError(_guess_field(str(exc)), str(exc)) from None

    def __getitem__(self, key):
        return self.values[key]

    def validate_paths(self, keys=PATH_KEYS) -> None:
        for key in keys:
            p = self.values.get(key)
            if p is None:
                raise ConfigError(key, "required path is missing")
            if not Path(p).exists():
                raise ConfigError(key, f"path does not exist: {p}")

    def model_config(self, vocab_src: int, vocab_tgt: int) -> ModelConfig:
        kw = {k: self.values[k] for k in _MODEL_KEYS}
        try:
            return ModelConfig(vocab_src, vocab_tgt, seed=self.values["seed"], **kw)
        except ValueError as exc:
            raise ConfigError(_guess_field(str(exc)), str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.values["seed"], **{k: self.values[k] for k in _TRAIN_KEYS})

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: self.values[k] for k in _LOSS_KEYS})

    def to_dict(self) -> dict:
        return dict(self.values)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigError("config", "top level must be a JSON object")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)


def _guess_field(message: str) -> str:
    for key in _RUN_DEFAULTS:
        if message.startswith(key) or f" {key} " in f" {message} " or f".{key} " in message:
            return key
    return "config"


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_run_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run config overrides")
    for key, default in _RUN_DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            kind = _parse_bool
        elif isinstance(default, int):
            kind = int
        elif isinstance(default, float) or key in _FLOAT_OR_NONE:
            kind = float
        elif key == "seed":
            kind = int
        else:
            kind = str
        group.add_argument(flag, dest=f"run_{key}", type=kind, default=None, metavar=key.upper())


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("run_") and v is not None}


def _load_data(cfg: RunConfig, splits=("train", "valid")):
    src_vocab = Vocab.load(cfg["src_vocab"])
    tgt_vocab = Vocab.load(cfg["tgt_vocab"])
    d_image = cfg["d_image"]
    return [load_jsonl(cfg[f"{s}_path"], d_image, src_vocab, tgt_vocab) for s in splits]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: output directory {out} exists (use --force)", file=sys.stderr)
            return 1
        shutil.rmtree(out)
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    try:
        spec = SyntheticSpec(
            n_concepts=args.n_concepts, n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test,
            noise_sigma=args.noise_sigma, d_image=args.d_image, seed=seed,
            distractor_vocab=args.distractor_vocab, gender_fraction=args.gender_fraction,
            min_fillers=args.min_fillers, max_fillers=args.max_fillers,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest = write_synthetic(out, spec)
    run = {
        "train_path": str(out / "train.jsonl"),
        "valid_path": str(out / "valid.jsonl"),
        "test_path": str(out / "test.jsonl"),
        "src_vocab": str(out / "src.vocab"),
        "tgt_vocab": str(out / "tgt.vocab"),
        "d_image": spec.d_image,
        "seed": seed,
    }
    (out / "run_config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest["counts"], sort_keys=True))
    return 0


def run_training(cfg: RunConfig, out_dir: Path, resume_epoch: int | None = None):
    cfg.validate_paths(("train_path", "valid_path", "src_vocab", "tgt_vocab"))
    train_set, valid_set = _load_data(cfg)
    model = GatedFusionTransformer(cfg.model_config(len(train_set.src_vocab), len(train_set.tgt_vocab)))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    resume = load_resume_state(out_dir, resume_epoch) if resume_epoch else None
    result = train(model, train_set, valid_set, cfg.train_config(), cfg.loss_weights(),
                   out_dir=out_dir, resume=resume, manifest_extra={"run_config": cfg.to_dict()})
    return model, result


def cmd_train(args) -> int:
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        out_dir = Path(cfg["out_dir"] or "runs/train")
        _, result = run_training(cfg, out_dir, args.resume_epoch)
    except ConfigError as exc:
        print(f"error: invalid config field {exc.field}: {exc}", file=sys.stderr)
        return 2
    summary = {
        "best_epoch": result.best.epoch,
        "best_valid_bleu": result.best.valid_score,
        "stopped_epoch": result.stopped_epoch,
        "steps": result.best.step if not result.step_log else result.step_log[-1]["step"],
        "out_dir": str(out_dir),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def run_eval(checkpoint: Path, test_path: str | None, out_dir: Path, seed: int, mode: str,
             beam_size: int | None = None, length_penalty: float | None = None):
    model, manifest = model_from_checkpoint(checkpoint)
    run = manifest.get("run_config") or {}
    tc = manifest.get("train_config", {})
    src_vocab = Vocab.load(run.get("src_vocab")) if run.get("src_vocab") else None
    tgt_vocab = Vocab.load(run.get("tgt_vocab")) if run.get("tgt_vocab") else None
    test_path = test_path or run.get("test_path")
    if test_path is None or src_vocab is None or tgt_vocab is None:
        raise ConfigError("test_path", "checkpoint manifest lacks data paths; pass --test")
    test = load_jsonl(test_path, model.config.d_image, src_vocab, tgt_vocab)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(
        model, test, seed=seed,
        beam_size=beam_size or tc.get("beam_size", 5),
        length_penalty=tc.get("length_penalty", 1.0) if length_penalty is None else length_penalty,
        max_len=tc.get("max_decode_len", 32), headline_mode=mode,
        hyp_path=out_dir / "hypotheses.txt",
    )
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    return report


def cmd_eval(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    try:
        report = run_eval(Path(args.checkpoint), args.test, Path(args.out_dir), seed, args.incongruent,
                          args.beam_size, args.length_penalty)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.to_json())
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"values must be comma-separated numbers, got {text!r}") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError("values must be a non-empty list of finite numbers")
    return values


def run_sweep(base: RunConfig, param: str, values: list[float], out_dir: Path) -> list[dict]:
    """Train from scratch and evaluate once per value; returns the CSV rows."""
    rows = []
    for v in values:
        point = RunConfig({**base.to_dict(), param: v})
        point_dir = out_dir / f"{param}_{v:g}"
        run_training(point, point_dir)
        report = run_eval(point_dir / "averaged.ckpt", point["test_path"], point_dir / "eval",
                          point["seed"], "shuffle")
        rows.append({
            "param": param,
            "value": v,
            "bleu": report.bleu_congruent,
            "delta_bleu": report.delta_bleu,
            "gender_accuracy": report.gender_accuracy,
            "ambiguous_accuracy": report.ambiguous_accuracy,
        })
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def cmd_sweep(args) -> int:
    try:
        base = RunConfig.load(args.config, _overrides(args))
        base.validate_paths()
        out_dir = Path(base["out_dir"] or "runs/sweep")
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = run_sweep(base, args.param, args.values, out_dir)
    except ConfigError as exc:
        print(f"error: invalid config field {exc.field}: {exc}", file=sys.stderr)
        return 2
    w = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS)
    w.writeheader()
    w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimmt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic ambiguous-translation dataset")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--seed", type=int, default=None)
    spec_defaults = SyntheticSpec()
    for name in ("n_concepts", "n_train", "n_valid", "n_test", "d_image", "distractor_vocab",
                 "min_fillers", "max_fillers"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(spec_defaults, name))
    for name in ("noise_sigma", "gender_fraction"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(spec_defaults, name))
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", default=None, help="flat JSON run config")
    t.add_argument("--resume-epoch", type=int, default=None,
                   help="continue the run in --out-dir after this epoch's checkpoint")
    _add_run_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint: BLEU, incongruent decoding, gender accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", default=None, help="test JSONL (defaults to the run's test_path)")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--incongruent", choices=("shuffle", "zero"), default="shuffle")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--beam-size", type=int, default=None)
    e.add_argument("--length-penalty", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="retrain and evaluate for each value of alpha, beta or rho")
    s.add_argument("--config", default=None)
    s.add_argument("--param", choices=("alpha", "beta", "rho"), required=True)
    s.add_argument("--values", type=_parse_values, required=True, help="comma-separated list")
    _add_run_overrides(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
