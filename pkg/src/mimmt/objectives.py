"""Training losses: likelihood, InfoNCE source-image alignment, clean-vs-corrupted hinge.

The joint objective is

    total = l_mmt + alpha * |s| * l_smi + beta * |s| * l_tmi

where ``|s|`` is the mean non-pad target length of the batch, scaling the two
sentence-level terms up to the token-level likelihood.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import PAD_ID, GatedFusionTransformer, ImageRepr
from .numerics import Tensor


@dataclass
class LossWeights:
    alpha: float = 1e-3
    beta: float = 1e-4
    margin_m: float = 1.0
    rho: float = 0.7
    temperature: float = 0.1
    # fixed |s|; None recomputes it from every batch
    avg_len_s: float | None = None
    tmi_detach_deteriorated: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.margin_m < 0:
            raise ValueError(f"margin_m must be >= 0, got {self.margin_m}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.avg_len_s is not None and self.avg_len_s <= 0:
            raise ValueError(f"avg_len_s must be positive, got {self.avg_len_s}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown LossWeights keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBundle:
    l_mmt: Tensor
    l_smi: Tensor
    l_tmi: Tensor
    total: Tensor
    avg_len_s: float

    def values(self) -> dict[str, float]:
        return {
            "l_mmt": self.l_mmt.item(),
            "l_smi": self.l_smi.item(),
            "l_tmi": self.l_tmi.item(),
            "total": self.total.item(),
        }


def token_logprobs(logits: Tensor, targets: np.ndarray) -> Tensor:
    """log p(target_t | ...) at each position, shape (B, T)."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise nx.ShapeError("token_logprobs", logits.shape, targets.shape)
    return nx.pick(nx.log_softmax(logits), targets)


def loss_mmt(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood over the non-pad target tokens."""
    targets = np.asarray(targets)
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("loss_mmt: batch contains only padding")
    lp = token_logprobs(logits, np.where(keep, targets, 0))
    return nx.scale(nx.tensor_sum(nx.apply_mask(lp, keep)), -1.0 / n)


def sequence_mean_logprob(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Per-example mean target-token log-prob, shape (B,)."""
    targets = np.asarray(targets)
    keep = targets != pad_id
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("sequence_mean_logprob: an example has no target tokens")
    lp = nx.apply_mask(token_logprobs(logits, np.where(keep, targets, 0)), keep)
    return nx.mul(nx.tensor_sum(lp, axis=1), Tensor(1.0 / counts))


def similarity_matrix(pooled_texts: Tensor, image_reprs: Tensor) -> Tensor:
    """Cosine similarities S[i, j] = cos(F(x_j), R(z_i)), shape (K, K)."""
    if pooled_texts.shape != image_reprs.shape or pooled_texts.ndim != 2:
        raise nx.ShapeError("similarity_matrix", pooled_texts.shape, image_reprs.shape)
    img = nx.l2_normalize(image_reprs)
    txt = nx.l2_normalize(pooled_texts)
    return nx.matmul(img, nx.swap_axes(txt, 0, 1))


def loss_smi(pooled_texts: Tensor, image_reprs: Tensor, temperature: float = 0.1) -> Tensor:
    """InfoNCE with in-batch negatives: each image must pick out its own sentence.

    For image i the candidates are every pooled sentence in the batch; the
    paired one is the positive. Returns the mean cross-entropy over images.
    """
    k = pooled_texts.shape[0]
    if k < 2:
        raise ValueError(f"loss_smi needs at least 2 examples for negatives, got {k}")
    logits = nx.scale(similarity_matrix(pooled_texts, image_reprs), 1.0 / temperature)
    diag = nx.pick(nx.log_softmax(logits), np.arange(k))
    return nx.scale(nx.tensor_sum(diag), -1.0 / k)


def deterioration_mask(shape: Sequence[int], rho: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 keep-mask where each unit is dropped with probability ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if rho == 0.0:
        return np.ones(shape)
    if rho == 1.0:
        return np.zeros(shape)
    return (rng.random(shape) >= rho).astype(np.float64)


def deteriorate(image_repr: Tensor | ImageRepr, rho: float,
                rng: np.random.Generator | int | None = None) -> Tensor:
    """Zero each unit of R(z) independently with probability ``rho``.

    Survivors keep their value (no 1/(1-rho) rescale). Deterministic for a given
    integer seed or generator state.
    """
    r = image_repr.projected if isinstance(image_repr, ImageRepr) else image_repr
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return nx.apply_mask(r, deterioration_mask(r.shape, rho, rng))


def loss_tmi(logp_clean: Tensor, logp_det: Tensor, margin_m: float = 1.0) -> Tensor:
    """Mean hinge max(0, m - (logp_clean - logp_det)) over examples."""
    if logp_clean.shape != logp_det.shape:
        raise nx.ShapeError("loss_tmi", logp_clean.shape, logp_det.shape)
    gap = nx.sub(logp_clean, logp_det)
    hinge = nx.relu(nx.add_constant(nx.neg(gap), np.full(gap.shape, float(margin_m))))
    return nx.tensor_mean(hinge)


def combine(l_mmt: Tensor, l_smi: Tensor, l_tmi: Tensor, weights: LossWeights,
            avg_len_s: float) -> Tensor:
    total = l_mmt
    if weights.alpha:
        total = nx.add(total, nx.scale(l_smi, weights.alpha * avg_len_s))
    if weights.beta:
        total = nx.add(total, nx.scale(l_tmi, weights.beta * avg_len_s))
    return total


def batch_avg_len(tgt_out: np.ndarray, pad_id: int = PAD_ID) -> float:
    return float((np.asarray(tgt_out) != pad_id).sum(axis=1).mean())


def combined_loss(model: GatedFusionTransformer, batch, weights: LossWeights,
                  seed: int | None = None, train: bool = False) -> LossBundle:
    """All three losses in one graph for a collated batch.

    ``seed`` drives dropout and the deterioration mask. The clean and
    deteriorated decoder passes share one encoder pass and use identical
    dropout masks, so only the image branch differs between them.
    """
    ss = np.random.SeedSequence(0 if seed is None else seed)
    enc_seed, dec_seed, det_seed = ss.spawn(3)
    drop = (lambda s: np.random.default_rng(s)) if train else (lambda s: None)

    enc = model.encode_source(batch.src, drop(enc_seed))
    img = model.project_image(batch.img)
    logits = model.decode_logits(model.fuse(enc, img), batch.tgt_in, drop(dec_seed))
    l_mmt = loss_mmt(logits, batch.tgt_out)
    s_len = weights.avg_len_s if weights.avg_len_s is not None else batch_avg_len(batch.tgt_out)

    zero = Tensor(0.0)
    # a one-example batch has no in-batch negatives, so it contributes no alignment term
    if weights.alpha and len(batch.src) >= 2:
        l_smi = loss_smi(enc.pooled, img.projected, weights.temperature)
    else:
        l_smi = zero

    if weights.beta:
        lp_clean = sequence_mean_logprob(logits, batch.tgt_out)
        det = ImageRepr(deteriorate(img, weights.rho, np.random.default_rng(det_seed)))
        det_logits = model.decode_logits(model.fuse(enc, det), batch.tgt_in, drop(dec_seed))
        lp_det = sequence_mean_logprob(det_logits, batch.tgt_out)
        if weights.tmi_detach_deteriorated:
            lp_det = Tensor(lp_det.data)
        l_tmi = loss_tmi(lp_clean, lp_det, weights.margin_m)
    else:
        l_tmi = zero

    total = combine(l_mmt, l_smi, l_tmi, weights, s_len)
    return LossBundle(l_mmt, l_smi, l_tmi, total, s_len)


def estimate_conditional_entropy(model, batches: Iterable, mode: str = "clean", rho: float = 1.0,
                                 seed: int = 0, per_token: bool = True,
                                 weights: np.ndarray | None = None,
                                 pad_id: int | None = PAD_ID) -> float:
    """Monte Carlo estimate of H(Y | X, Z) (mode="clean") or H(Y | X, Z~).

    Averages -log p(y | x, z) over held-out examples; with ``per_token`` the sum
    is divided by the number of target tokens instead of the number of
    sentences. ``weights`` (one per example, in iteration order) turns the
    average into an expectation, e.g. over an enumerated support. ``pad_id=None``
    scores every target position, for supports that use the whole vocabulary.
    """
    if mode not in ("clean", "deteriorated"):
        raise ValueError(f"mode must be 'clean' or 'deteriorated', got {mode!r}")
    rng = np.random.default_rng(seed)
    seq_lp: list[np.ndarray] = []
    seq_len: list[np.ndarray] = []
    with nx.no_grad():
        for batch in batches:
            enc = model.encode_source(batch.src)
            img = model.project_image(batch.img)
            if mode == "deteriorated":
                img = ImageRepr(deteriorate(img, rho, rng))
            logits = model.decode_logits(model.fuse(enc, img), batch.tgt_in)
            if pad_id is None:
                keep = np.ones(batch.tgt_out.shape, dtype=bool)
            else:
                keep = batch.tgt_out != pad_id
            lp = token_logprobs(logits, np.where(keep, batch.tgt_out, 0)).data * keep
            seq_lp.append(lp.sum(axis=1))
            seq_len.append(keep.sum(axis=1))
    if not seq_lp:
        raise ValueError("estimate_conditional_entropy: empty dataset")
    lp = np.concatenate(seq_lp)
    lens = np.concatenate(seq_len).astype(np.float64)
    w = np.ones_like(lp) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != lp.shape:
        raise ValueError(f"weights length {w.shape[0]} != number of examples {lp.shape[0]}")
    if per_token:
        return float(-(w * lp).sum() / (w * lens).sum())
    return float(-(w * lp).sum() / w.sum())
