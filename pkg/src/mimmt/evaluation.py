"""Decoding and the visual-awareness metrics.

Incongruent decoding (ID) re-decodes the test set with each image swapped for
another example's image (``shuffle``) or replaced by zeros (``zero``) and
reports the BLEU drop. Gender accuracy (GA) compares the pronoun-derived
gender class of hypothesis and reference.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, collate
from .model import BOS_ID, EOS_ID

MALE_PRONOUNS = frozenset({"he", "him", "his", "himself"})
FEMALE_PRONOUNS = frozenset({"she", "her", "hers", "herself"})


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


def beam_search(model, src: np.ndarray, img: np.ndarray, beam_size: int = 5,
                length_penalty: float = 1.0, max_len: int = 32) -> list[list[int]]:
    """Decode a batch of sentences; returns token ids without <s>/</s>.

    Candidates are ranked by cumulative log-prob while searching; a finished
    hypothesis is scored by logprob / len**length_penalty, where len counts
    the emitted tokens including </s>. Ties go to the lexicographically
    smaller id sequence. ``model`` only needs ``start_decode(src, img)``
    returning an object with ``logprobs(rows, prefixes)``.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    ctx = model.start_decode(src, img)
    n = len(src)
    # active hypotheses per sentence: (score, tokens)
    active: list[list[tuple[float, tuple[int, ...]]]] = [[(0.0, ())] for _ in range(n)]
    finished: list[list[tuple[float, tuple[int, ...]]]] = [[] for _ in range(n)]

    for step in range(max_len):
        rows, prefixes, owners = [], [], []
        for s in range(n):
            for h, (_, toks) in enumerate(active[s]):
                rows.append(s)
                prefixes.append((BOS_ID,) + toks)
                owners.append((s, h))
        if not rows:
            break
        lp = ctx.logprobs(np.array(rows), np.array(prefixes, dtype=np.int64))
        by_sentence: dict[int, list[tuple[float, tuple[int, ...]]]] = {}
        for r, (s, h) in enumerate(owners):
            base, toks = active[s][h]
            cand = by_sentence.setdefault(s, [])
            # only the top beam_size tokens of each row can survive
            top = np.argsort(-lp[r], kind="stable")[:beam_size]
            for tok in top:
                cand.append((base + float(lp[r, tok]), toks + (int(tok),)))
        last = step == max_len - 1
        for s in range(n):
            cand = sorted(by_sentence.get(s, []), key=lambda c: (-c[0], c[1]))[:beam_size]
            active[s] = []
            for score, toks in cand:
                if toks[-1] == EOS_ID or last:
                    length = len(toks)
                    norm = score / (length ** length_penalty) if length_penalty else score
                    finished[s].append((norm, toks))
                else:
                    active[s].append((score, toks))
            if len(finished[s]) >= beam_size:
                active[s] = []

    out = []
    for s in range(n):
        best = min(finished[s], key=lambda c: (-c[0], c[1]))[1]
        out.append([t for t in best if t != EOS_ID])
    return out


def greedy_decode(model, src: np.ndarray, img: np.ndarray, max_len: int = 32) -> list[list[int]]:
    ctx = model.start_decode(src, img)
    n = len(src)
    prefixes = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        lp = ctx.logprobs(np.arange(n), prefixes)
        nxt = np.argmax(lp, axis=1)
        nxt = np.where(done, EOS_ID, nxt)
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        done |= nxt == EOS_ID
        if done.all():
            break
    out = []
    for row in prefixes[:, 1:]:
        toks = []
        for t in row:
            if t == EOS_ID:
                break
            toks.append(int(t))
        out.append(toks)
    return out


def translate(model, dataset: Dataset, images: np.ndarray | None = None, beam_size: int = 5,
              length_penalty: float = 1.0, max_len: int = 32, batch_size: int = 64) -> list[list[str]]:
    """Decode every example (optionally with substituted images) into target tokens."""
    hyps: list[list[str]] = []
    for lo in range(0, len(dataset), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(dataset))))
        batch = collate(dataset, idx)
        img = batch.img if images is None else np.asarray(images)[idx]
        ids = beam_search(model, batch.src, img, beam_size, length_penalty, max_len)
        hyps.extend(dataset.tgt_vocab.decode(h) for h in ids)
    return hyps


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_order: int = 4) -> float:
    """Corpus BLEU-4 in [0, 100], single reference, no smoothing (multi-bleu convention)."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu: empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# gender accuracy
# ---------------------------------------------------------------------------


def gender_class(tokens: Sequence[str]) -> str | None:
    """'male', 'female', or None when both or neither pronoun set occurs."""
    toks = set(tokens)
    male, female = bool(toks & MALE_PRONOUNS), bool(toks & FEMALE_PRONOUNS)
    if male and not female:
        return "male"
    if female and not male:
        return "female"
    return None


def gender_accuracy(hypotheses: Sequence[Sequence[str]],
                    references: Sequence[Sequence[str]]) -> tuple[float, int]:
    """(accuracy, n_determined) over sentences whose reference is determined.

    An undetermined hypothesis against a determined reference counts as wrong.
    Accuracy is 0.0 when no reference is determined.
    """
    correct = total = 0
    for hyp, ref in zip(hypotheses, references):
        ref_cls = gender_class(ref)
        if ref_cls is None:
            continue
        total += 1
        correct += gender_class(hyp) == ref_cls
    return (correct / total if total else 0.0), total


def ambiguous_accuracy(hypotheses: Sequence[Sequence[str]], dataset: Dataset) -> float:
    """Share of concept examples whose hypothesis has the right sense and not the wrong one."""
    hits = total = 0
    for hyp, ex in zip(hypotheses, dataset):
        if ex.meta.get("kind") != "concept":
            continue
        k, b = ex.meta["concept"], ex.meta["sense"]
        right, wrong = f"t{k}_{b}", f"t{k}_{1 - b}"
        total += 1
        hits += right in hyp and wrong not in hyp
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# incongruent decoding
# ---------------------------------------------------------------------------


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed point (rejection sampling)."""
    if n < 2:
        raise ValueError(f"a derangement needs at least 2 elements, got {n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def incongruent_images(dataset: Dataset, mode: str, seed: int = 0) -> np.ndarray:
    imgs = np.stack([ex.img for ex in dataset])
    if mode == "shuffle":
        return imgs[derangement(len(dataset), np.random.default_rng(seed))]
    if mode == "zero":
        return np.zeros_like(imgs)
    raise ValueError(f"incongruent mode must be 'shuffle' or 'zero', got {mode!r}")


def incongruent_eval(model, dataset: Dataset, mode: str = "shuffle", seed: int = 0,
                     beam_size: int = 5, length_penalty: float = 1.0, max_len: int = 32,
                     congruent_hyps: list[list[str]] | None = None) -> dict:
    refs = [dataset.tgt_vocab.decode(ex.tgt) for ex in dataset]
    if congruent_hyps is None:
        congruent_hyps = translate(model, dataset, None, beam_size, length_penalty, max_len)
    inc_hyps = translate(model, dataset, incongruent_images(dataset, mode, seed), beam_size,
                         length_penalty, max_len)
    congruent = corpus_bleu(congruent_hyps, refs)
    incongruent = corpus_bleu(inc_hyps, refs)
    return {
        "mode": mode,
        "bleu_congruent": congruent,
        "bleu_incongruent": incongruent,
        "delta_bleu": congruent - incongruent,
        "hypotheses": inc_hyps,
    }


@dataclass
class EvalReport:
    bleu_congruent: float
    bleu_incongruent_shuffle: float
    bleu_incongruent_zero: float
    delta_bleu: float
    delta_bleu_zero: float
    incongruent_mode: str
    gender_accuracy: float
    n_gender_determined: int
    ambiguous_accuracy: float
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": [
        "bleu_congruent", "bleu_incongruent_shuffle", "bleu_incongruent_zero", "delta_bleu",
        "delta_bleu_zero", "incongruent_mode", "gender_accuracy", "n_gender_determined",
        "ambiguous_accuracy", "n_examples",
    ],
    "properties": {
        "bleu_congruent": {"type": "number", "minimum": 0, "maximum": 100},
        "bleu_incongruent_shuffle": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "bleu_incongruent_zero": {"type": "number", "minimum": 0, "maximum": 100},
        "delta_bleu": {"type": "number"},
        "delta_bleu_zero": {"type": "number"},
        "incongruent_mode": {"enum": ["shuffle", "zero"]},
        "gender_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "n_gender_determined": {"type": "integer", "minimum": 0},
        "ambiguous_accuracy": {"type": ["number", "null"]},
        "n_examples": {"type": "integer", "minimum": 1},
    },
}


def evaluate(model, dataset: Dataset, seed: int = 0, beam_size: int = 5, length_penalty: float = 1.0,
             max_len: int = 32, headline_mode: str = "shuffle",
             hyp_path: str | Path | None = None) -> EvalReport:
    """Congruent BLEU, both incongruent modes, GA and ambiguous-token accuracy."""
    refs = [dataset.tgt_vocab.decode(ex.tgt) for ex in dataset]
    hyps = translate(model, dataset, None, beam_size, length_penalty, max_len)
    if hyp_path is not None:
        Path(hyp_path).write_text("".join(" ".join(h) + "\n" for h in hyps))
    bleu = corpus_bleu(hyps, refs)
    zero = incongruent_eval(model, dataset, "zero", seed, beam_size, length_penalty, max_len, hyps)
    if len(dataset) >= 2:
        shuf = incongruent_eval(model, dataset, "shuffle", seed, beam_size, length_penalty, max_len, hyps)
        shuf_bleu = shuf["bleu_incongruent"]
    else:
        shuf_bleu = None
    if headline_mode == "shuffle" and shuf_bleu is None:
        raise ValueError("shuffle mode needs at least 2 test examples")
    ga, n_det = gender_accuracy(hyps, refs)
    amb = ambiguous_accuracy(hyps, dataset)
    return EvalReport(
        bleu_congruent=bleu,
        bleu_incongruent_shuffle=shuf_bleu,
        bleu_incongruent_zero=zero["bleu_incongruent"],
        delta_bleu=bleu - (shuf_bleu if headline_mode == "shuffle" else zero["bleu_incongruent"]),
        delta_bleu_zero=bleu - zero["bleu_incongruent"],
        incongruent_mode=headline_mode,
        gender_accuracy=ga,
        n_gender_determined=n_det,
        ambiguous_accuracy=None if math.isnan(amb) else amb,
        n_examples=len(dataset),
    )
