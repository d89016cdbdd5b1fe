"""Optimization loop: Adam with inverse-sqrt warmup, early stopping, checkpoint averaging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import Dataset, collate, make_batches
from .evaluation import corpus_bleu, gender_accuracy, incongruent_images, translate
from .model import GatedFusionTransformer, save_checkpoint
from .objectives import LossWeights, combined_loss

log = logging.getLogger(__name__)

STEP_COLUMNS = ["step", "l_mmt", "l_smi", "l_tmi", "total", "lr"]
EPOCH_COLUMNS = ["epoch", "valid_bleu", "valid_id", "valid_ga"]


@dataclass
class TrainConfig:
    lr_peak: float = 0.005
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    max_tokens: int = 400
    max_epochs: int = 30
    patience: int = 10
    checkpoint_keep: int = 5
    average_last_k: int = 5
    seed: int = 0
    # image features replaced by zeros in training and validation (text-only baseline)
    zero_image: bool = False
    valid_beam_size: int = 1
    beam_size: int = 5
    length_penalty: float = 1.0
    max_decode_len: int = 32

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.checkpoint_keep < 1 or self.average_last_k < 1:
            raise ValueError("checkpoint_keep and average_last_k must be >= 1")
        if self.average_last_k > self.checkpoint_keep:
            raise ValueError(
                f"average_last_k ({self.average_last_k}) exceeds checkpoint_keep ({self.checkpoint_keep})"
            )
        if self.lr_peak < 0:
            raise ValueError(f"lr_peak must be >= 0, got {self.lr_peak}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def inverse_sqrt_lr(step: int, lr_peak: float, warmup_steps: int) -> float:
    """Linear warmup to ``lr_peak`` at ``warmup_steps``, then decay as step^-0.5."""
    step = max(step, 1)
    return lr_peak * min(step ** -0.5, step * warmup_steps ** -1.5) * warmup_steps ** 0.5


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: "Checkpoint | None"):
        self.step = step
        self.last_good = last_good
        super().__init__(f"total loss became non-finite at step {step}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, nx.Tensor], state: AdamState, step: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """One bias-corrected Adam update in place; ``step`` counts from 1."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(name)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    epoch: int
    valid_score: float
    fingerprint: str


def average_checkpoints(checkpoints: list[Checkpoint]) -> dict[str, np.ndarray]:
    """Elementwise mean of each named parameter across checkpoints."""
    if not checkpoints:
        raise ValueError("average_checkpoints needs at least one checkpoint")
    fp = checkpoints[0].fingerprint
    names = set(checkpoints[0].params)
    for ck in checkpoints[1:]:
        if ck.fingerprint != fp:
            raise ValueError(f"fingerprint mismatch: {ck.fingerprint} != {fp}")
        if set(ck.params) != names:
            raise ValueError("checkpoints hold different parameter names")
    k = len(checkpoints)
    return {name: sum(ck.params[name] for ck in checkpoints) / k for name in sorted(names)}


@dataclass
class TrainResult:
    best: Checkpoint
    averaged: dict[str, np.ndarray]
    step_log: list[dict]
    epoch_log: list[dict]
    stopped_epoch: int


def _images(batch_img: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    return np.zeros_like(batch_img) if cfg.zero_image else batch_img


def validate(model: GatedFusionTransformer, dataset: Dataset, cfg: TrainConfig) -> dict:
    """Valid BLEU, shuffle-mode delta BLEU and gender accuracy."""
    refs = [dataset.tgt_vocab.decode(ex.tgt) for ex in dataset]
    imgs = np.stack([ex.img for ex in dataset])
    kw = dict(beam_size=cfg.valid_beam_size, length_penalty=cfg.length_penalty,
              max_len=cfg.max_decode_len)
    hyps = translate(model, dataset, _images(imgs, cfg), **kw)
    bleu = corpus_bleu(hyps, refs)
    if len(dataset) >= 2:
        shuffled = _images(incongruent_images(dataset, "shuffle", cfg.seed), cfg)
        delta = bleu - corpus_bleu(translate(model, dataset, shuffled, **kw), refs)
    else:
        delta = 0.0
    ga, _ = gender_accuracy(hyps, refs)
    return {"valid_bleu": bleu, "valid_id": delta, "valid_ga": ga}


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns})


def _manifest(model, cfg, weights, ck: Checkpoint, extra: dict | None = None) -> dict:
    m = {
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "loss_weights": weights.to_dict(),
        "step": ck.step,
        "epoch": ck.epoch,
        "valid_score": None if math.isnan(ck.valid_score) else ck.valid_score,
        "fingerprint": ck.fingerprint,
    }
    if extra:
        m.update(extra)
    return m


def train(model: GatedFusionTransformer, train_set: Dataset, valid_set: Dataset, cfg: TrainConfig,
          weights: LossWeights, out_dir: str | Path | None = None,
          resume: dict | None = None, manifest_extra: dict | None = None,
          on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train until ``max_epochs`` or ``patience`` epochs without a better valid BLEU.

    Every step's randomness (dropout, deterioration) is derived from
    (seed, step) and every epoch's batch order from (seed, epoch), so a run
    resumed from an epoch checkpoint reproduces the uninterrupted run.
    ``resume`` is the dict produced by :func:`load_resume_state`.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    state = AdamState()
    step, start_epoch = 0, 1
    best: Checkpoint | None = None
    bad_epochs = 0
    step_log: list[dict] = []
    epoch_log: list[dict] = []
    recent: list[Checkpoint] = []
    if resume is not None:
        model.load_state_dict(resume["params"])
        state = resume["adam"]
        step = resume["step"]
        start_epoch = resume["epoch"] + 1
        best = resume["best"]
        bad_epochs = resume["bad_epochs"]
        step_log = list(resume["step_log"])
        epoch_log = list(resume["epoch_log"])
        recent = list(resume["recent"])

    params = model.parameters()
    fingerprint = model.fingerprint()

    def manifest(ck: Checkpoint, extra: dict | None = None) -> dict:
        return _manifest(model, cfg, weights, ck, {**(manifest_extra or {}), **(extra or {})})

    last_good = best
    completed = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        if best is not None and bad_epochs >= cfg.patience:
            break
        for idx in make_batches(train_set, cfg.max_tokens, cfg.seed, epoch):
            batch = collate(train_set, idx)
            batch = batch.with_images(_images(batch.img, cfg))
            step += 1
            model.zero_grad()
            bundle = combined_loss(model, batch, weights, seed=[cfg.seed, step], train=True)
            vals = bundle.values()
            if not math.isfinite(vals["total"]):
                raise TrainingDiverged(step, last_good)
            nx.backward(bundle.total)
            lr = inverse_sqrt_lr(step, cfg.lr_peak, cfg.warmup_steps)
            adam_step(params, state, step, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            step_log.append({"step": step, **vals, "lr": lr})

        metrics = validate(model, valid_set, cfg)
        epoch_log.append({"epoch": epoch, **metrics})
        ck = Checkpoint(model.state_dict(), step, epoch, metrics["valid_bleu"], fingerprint)
        last_good = ck
        recent = (recent + [ck])[-cfg.checkpoint_keep:]
        improved = best is None or ck.valid_score > best.valid_score
        if improved:
            best, bad_epochs = ck, 0
        else:
            bad_epochs += 1
        completed = epoch
        log.info("epoch %d step %d valid_bleu %.2f id %.2f ga %.3f", epoch, step,
                 metrics["valid_bleu"], metrics["valid_id"], metrics["valid_ga"])
        if out is not None:
            extra = {"best_epoch": best.epoch, "best_score": best.valid_score, "bad_epochs": bad_epochs}
            if improved:
                save_checkpoint(out / "best.ckpt", best.params, manifest(best))
            path = out / "checkpoints" / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(path, ck.params, manifest(ck, extra))
            save_checkpoint(out / "checkpoints" / f"epoch{epoch:03d}.optim",
                            _optim_arrays(state), {"step": step})
            _prune(out / "checkpoints", cfg.checkpoint_keep, epoch)
            _write_csv(out / "train_log.csv", STEP_COLUMNS, step_log)
            _write_csv(out / "epoch_log.csv", EPOCH_COLUMNS, epoch_log)
        if on_epoch is not None:
            on_epoch(epoch, metrics)

    if best is None:
        raise RuntimeError("no epoch was run")
    averaged = average_checkpoints(recent[-cfg.average_last_k:])
    if out is not None:
        avg_ck = Checkpoint(averaged, step, completed, float("nan"), fingerprint)
        save_checkpoint(out / "averaged.ckpt", averaged,
                        manifest(avg_ck, {"averaged_epochs": [c.epoch for c in recent[-cfg.average_last_k:]]}))
    return TrainResult(best, averaged, step_log, epoch_log, completed)


def _optim_arrays(state: AdamState) -> dict[str, np.ndarray]:
    arrays = {f"m.{k}": v for k, v in state.m.items()}
    arrays.update({f"v.{k}": v for k, v in state.v.items()})
    return arrays


def _prune(ckpt_dir: Path, keep: int, epoch: int) -> None:
    old = epoch - keep
    if old >= 1:
        for suffix in (".ckpt", ".ckpt.json", ".optim", ".optim.json"):
            p = ckpt_dir / f"epoch{old:03d}{suffix}"
            if p.exists():
                p.unlink()


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()})
        return rows


def load_resume_state(run_dir: str | Path, epoch: int) -> dict:
    """Everything :func:`train` needs to continue after ``epoch`` of a run in ``run_dir``."""
    from .model import load_checkpoint

    run = Path(run_dir)
    ckdir = run / "checkpoints"
    params, manifest = load_checkpoint(ckdir / f"epoch{epoch:03d}.ckpt")
    optim, _ = load_checkpoint(ckdir / f"epoch{epoch:03d}.optim")
    state = AdamState(
        m={k[2:]: v for k, v in optim.items() if k.startswith("m.")},
        v={k[2:]: v for k, v in optim.items() if k.startswith("v.")},
    )
    step_log = [r for r in _read_csv(run / "train_log.csv") if r["step"] <= manifest["step"]]
    epoch_log = [r for r in _read_csv(run / "epoch_log.csv") if r["epoch"] <= epoch]
    recent = []
    for e in range(1, epoch + 1):
        p = ckdir / f"epoch{e:03d}.ckpt"
        if p.exists():
            ps, mf = load_checkpoint(p)
            recent.append(Checkpoint(ps, mf["step"], mf["epoch"], mf["valid_score"], mf["fingerprint"]))
    best_epoch = manifest["best_epoch"]
    best = next((c for c in recent if c.epoch == best_epoch), None)
    if best is None:
        ps, mf = load_checkpoint(run / "best.ckpt")
        if mf["epoch"] != best_epoch:
            raise ValueError(
                f"best.ckpt holds epoch {mf['epoch']}, but epoch {epoch} expects best epoch {best_epoch}"
            )
        best = Checkpoint(ps, mf["step"], mf["epoch"], mf["valid_score"], mf["fingerprint"])
    return {
        "params": params,
        "adam": state,
        "step": manifest["step"],
        "epoch": epoch,
        "best": best,
        "bad_epochs": manifest["bad_epochs"],
        "step_log": step_log,
        "epoch_log": epoch_log,
        "recent": recent,
    }
