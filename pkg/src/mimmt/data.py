"""Triplet datasets, vocabularies, token-budget batching and the synthetic task.

The synthetic generator builds a translation task where the source sentence
is ambiguous and only the image tells the two readings apart:

* concept examples carry one ambiguous source word ``a{k}`` whose target is
  ``t{k}_0`` or ``t{k}_1``; the image is the basis vector for sense ``2k + b``;
* gender examples carry the neutral pronoun ``o`` (and possessive ``onun``),
  rendered as he/she (his/her) depending on the image's gender slot.

Filler words ``f{i}`` translate one-to-one to ``g{i}``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocab:
    """Token <-> id map with pad=0, bos=1, eos=2, unk=3 reserved."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD_ID, BOS_ID):
                continue
            if strip and i == EOS_ID:
                break
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK_ID])
        return out

    def save(self, path: str | Path) -> None:
        """One token per line; line n holds id n + 4."""
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class TripletExample:
    src: list[int]
    tgt: list[int]
    img: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise ValueError("TripletExample needs non-empty src and tgt")
        self.img = np.asarray(self.img, dtype=np.float64)
        if self.img.ndim != 1 or not np.all(np.isfinite(self.img)):
            raise ValueError("TripletExample img must be a finite 1-D vector")


@dataclass
class Dataset:
    examples: list[TripletExample]
    src_vocab: Vocab
    tgt_vocab: Vocab
    d_image: int

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> TripletExample:
        return self.examples[i]

    def __iter__(self) -> Iterator[TripletExample]:
        return iter(self.examples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.src_vocab, self.tgt_vocab, self.d_image)


@dataclass
class Batch:
    """Padded arrays for one batch. ``tgt_in`` is <s>+y, ``tgt_out`` is y+</s>."""

    indices: np.ndarray
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    img: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def with_images(self, img: np.ndarray) -> "Batch":
        return Batch(self.indices, self.src, self.tgt_in, self.tgt_out, np.asarray(img, dtype=np.float64))


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def load_jsonl(path: str | Path, d_image: int | None = None, src_vocab: Vocab | None = None,
               tgt_vocab: Vocab | None = None) -> Dataset:
    """Read {"src": str, "tgt": str, "img": [float]} records, one per line.

    Vocabularies are grown from the file when not supplied; with a supplied
    vocabulary unknown tokens map to <unk>. ``d_image`` defaults to the first
    record's feature length.
    """
    path = Path(path)
    build_src, build_tgt = src_vocab is None, tgt_vocab is None
    src_vocab = src_vocab or Vocab()
    tgt_vocab = tgt_vocab or Vocab()
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                src_toks, tgt_toks, img = rec["src"].split(), rec["tgt"].split(), rec["img"]
            except (json.JSONDecodeError, KeyError, AttributeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if d_image is None:
                d_image = len(img)
            if len(img) != d_image:
                raise ValueError(f"{path}:{lineno}: img length {len(img)} != d_image {d_image}")
            src = [src_vocab.add(t) for t in src_toks] if build_src else src_vocab.encode(src_toks)
            tgt = [tgt_vocab.add(t) for t in tgt_toks] if build_tgt else tgt_vocab.encode(tgt_toks)
            try:
                examples.append(TripletExample(src, tgt, img, rec.get("meta", {})))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not examples:
        raise ValueError(f"{path}: empty dataset")
    return Dataset(examples, src_vocab, tgt_vocab, d_image)


def write_jsonl(path: str | Path, dataset: Dataset, with_meta: bool = True) -> None:
    with open(path, "w") as fh:
        for ex in dataset:
            rec = {
                "src": " ".join(dataset.src_vocab.decode(ex.src, strip=False)),
                "tgt": " ".join(dataset.tgt_vocab.decode(ex.tgt, strip=False)),
                "img": [float(v) for v in ex.img],
            }
            if with_meta and ex.meta:
                rec["meta"] = ex.meta
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def make_batches(dataset: Dataset, max_tokens: int, seed: int = 0, epoch: int = 0,
                 shuffle: bool = True) -> list[np.ndarray]:
    """Group example indices so that batch_size * longest side <= max_tokens.

    Examples are sorted by length (ties broken by a seeded shuffle) and cut
    greedily; the batch order is then shuffled with (seed, epoch).
    """
    n = len(dataset)
    src_len = np.array([len(ex.src) for ex in dataset])
    tgt_len = np.array([len(ex.tgt) for ex in dataset])
    longest = np.maximum(src_len, tgt_len)
    if n and longest.max() > max_tokens:
        i = int(np.argmax(longest))
        raise ValueError(f"example {i} has {longest[i]} tokens, more than max_tokens={max_tokens}")
    rng = np.random.default_rng([seed, epoch])
    tiebreak = rng.permutation(n) if shuffle else np.arange(n)
    order = np.lexsort((tiebreak, src_len, tgt_len))

    batches: list[np.ndarray] = []
    current: list[int] = []
    max_src = max_tgt = 0
    for i in order:
        ms, mt = max(max_src, src_len[i]), max(max_tgt, tgt_len[i])
        if current and (len(current) + 1) * max(ms, mt) > max_tokens:
            batches.append(np.array(current))
            current, ms, mt = [], src_len[i], tgt_len[i]
        current.append(int(i))
        max_src, max_tgt = ms, mt
    if current:
        batches.append(np.array(current))
    if shuffle:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def collate(dataset: Dataset, indices: Sequence[int]) -> Batch:
    exs = [dataset[i] for i in indices]
    b = len(exs)
    s = max(len(e.src) for e in exs)
    t = max(len(e.tgt) for e in exs) + 1
    src = np.full((b, s), PAD_ID, dtype=np.int64)
    tgt_in = np.full((b, t), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, t), PAD_ID, dtype=np.int64)
    for r, e in enumerate(exs):
        src[r, : len(e.src)] = e.src
        tgt_in[r, 0] = BOS_ID
        tgt_in[r, 1 : len(e.tgt) + 1] = e.tgt
        tgt_out[r, : len(e.tgt)] = e.tgt
        tgt_out[r, len(e.tgt)] = EOS_ID
    img = np.stack([e.img for e in exs])
    return Batch(np.asarray(indices), src, tgt_in, tgt_out, img)


def iterate_batches(dataset: Dataset, max_tokens: int, seed: int = 0, epoch: int = 0,
                    shuffle: bool = True) -> Iterator[Batch]:
    for idx in make_batches(dataset, max_tokens, seed, epoch, shuffle):
        yield collate(dataset, idx)


# ---------------------------------------------------------------------------
# synthetic ambiguous-translation task
# ---------------------------------------------------------------------------

MALE_FORMS = {"o": "he", "onun": "his"}
FEMALE_FORMS = {"o": "she", "onun": "her"}


@dataclass
class SyntheticSpec:
    n_concepts: int = 8
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 400
    noise_sigma: float = 0.1
    d_image: int = 64
    seed: int = 0
    distractor_vocab: int = 24
    gender_fraction: float = 0.25
    min_fillers: int = 2
    max_fillers: int = 5

    def __post_init__(self):
        for name in ("n_concepts", "n_train", "n_valid", "n_test", "distractor_vocab", "d_image"):
            if getattr(self, name) < 1:
                raise ValueError(f"SyntheticSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.gender_fraction <= 1.0:
            raise ValueError(f"gender_fraction must lie in [0, 1], got {self.gender_fraction}")
        if not 0 <= self.min_fillers <= self.max_fillers:
            raise ValueError("need 0 <= min_fillers <= max_fillers")
        if self.d_image < self.image_slots:
            raise ValueError(
                f"d_image={self.d_image} is too small: {self.n_concepts} concepts need "
                f"{2 * self.n_concepts} slots plus {self.image_slots - 2 * self.n_concepts} gender slots"
            )

    @property
    def image_slots(self) -> int:
        return 2 * self.n_concepts + (2 if self.gender_fraction > 0 else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_vocabs(spec: SyntheticSpec) -> tuple[Vocab, Vocab]:
    src = Vocab([f"a{k}" for k in range(spec.n_concepts)]
                + [f"f{i}" for i in range(spec.distractor_vocab)] + ["o", "onun"])
    tgt = Vocab([f"t{k}_{b}" for k in range(spec.n_concepts) for b in (0, 1)]
                + [f"g{i}" for i in range(spec.distractor_vocab)] + ["he", "she", "his", "her"])
    return src, tgt


def _sentence(rng, spec: SyntheticSpec, kind: str, concept: int, sense: int):
    """Source and target token lists plus meta for one example."""
    n_fill = int(rng.integers(spec.min_fillers, spec.max_fillers + 1))
    fillers = [int(f) for f in rng.integers(0, spec.distractor_vocab, size=n_fill)]
    src = [f"f{f}" for f in fillers]
    tgt = [f"g{f}" for f in fillers]
    if kind == "concept":
        pos = int(rng.integers(0, n_fill + 1))
        src.insert(pos, f"a{concept}")
        tgt.insert(pos, f"t{concept}_{sense}")
        meta = {"kind": "concept", "concept": concept, "sense": sense}
    else:
        forms = MALE_FORMS if sense == 0 else FEMALE_FORMS
        src.insert(0, "o")
        tgt.insert(0, forms["o"])
        if rng.random() < 0.5:
            pos = int(rng.integers(1, n_fill + 2))
            src.insert(pos, "onun")
            tgt.insert(pos, forms["onun"])
        meta = {"kind": "gender", "gender": "male" if sense == 0 else "female"}
    return src, tgt, meta


def _image(rng, spec: SyntheticSpec, slot: int) -> np.ndarray:
    img = np.zeros(spec.d_image)
    img[slot] = 1.0
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=spec.d_image)
    return img


def _plan(n: int, spec: SyntheticSpec) -> list[tuple[str, int, int]]:
    """(kind, concept, sense) for n examples; senses balanced within each concept."""
    n_gender = int(round(spec.gender_fraction * n))
    plan = [("gender", -1, i % 2) for i in range(n_gender)]
    counts = [0] * spec.n_concepts
    for i in range(n - n_gender):
        k = i % spec.n_concepts
        plan.append(("concept", k, counts[k] % 2))
        counts[k] += 1
    return plan


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train/valid/test splits, disjoint on (source, sense) while the space allows."""
    rng = np.random.default_rng(spec.seed)
    src_vocab, tgt_vocab = synthetic_vocabs(spec)
    seen: set[tuple] = set()
    gender_slot = 2 * spec.n_concepts
    splits = []
    for n in (spec.n_train, spec.n_valid, spec.n_test):
        plan = _plan(n, spec)
        examples = []
        for j in rng.permutation(len(plan)):
            kind, concept, sense = plan[j]
            for _ in range(50):
                src, tgt, meta = _sentence(rng, spec, kind, concept, sense)
                key = (tuple(src), sense)
                if key not in seen:
                    break
            seen.add(key)
            slot = 2 * concept + sense if kind == "concept" else gender_slot + sense
            examples.append(TripletExample(src_vocab.encode(src), tgt_vocab.encode(tgt),
                                           _image(rng, spec, slot), meta))
        splits.append(Dataset(examples, src_vocab, tgt_vocab, spec.d_image))
    return splits[0], splits[1], splits[2]


def nearest_basis_sense(img: np.ndarray, n_concepts: int) -> tuple[int, int]:
    """(concept, sense) of the largest of the first 2*n_concepts feature slots."""
    slot = int(np.argmax(np.asarray(img)[: 2 * n_concepts]))
    return slot // 2, slot % 2


def write_synthetic(out_dir: str | Path, spec: SyntheticSpec) -> dict:
    """Write train/valid/test JSONL, both vocabularies and a manifest; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid, test = generate_synthetic(spec)
    for name, ds in (("train", train), ("valid", valid), ("test", test)):
        write_jsonl(out / f"{name}.jsonl", ds)
    train.src_vocab.save(out / "src.vocab")
    train.tgt_vocab.save(out / "tgt.vocab")
    manifest = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "counts": {"train": len(train), "valid": len(valid), "test": len(test)},
        "vocab_size_src": len(train.src_vocab),
        "vocab_size_tgt": len(train.tgt_vocab),
        "files": ["train.jsonl", "valid.jsonl", "test.jsonl", "src.vocab", "tgt.vocab"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest

