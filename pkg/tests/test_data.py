import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimmt.data import (
    Dataset,
    SyntheticSpec,
    TripletExample,
    Vocab,
    collate,
    generate_synthetic,
    load_jsonl,
    make_batches,
    nearest_basis_sense,
    write_jsonl,
    write_synthetic,
)


def toy_dataset(lengths, d_image=2):
    vocab = Vocab(["x", "y"])
    exs = [TripletExample([4] * s, [5] * t, np.zeros(d_image)) for s, t in lengths]
    return Dataset(exs, vocab, vocab, d_image)


# ------------------------------------------------------------------- vocab


def test_vocab_reserved_ids_and_unknown():
    v = Vocab(["hello", "world"])
    assert [v.lookup(t) for t in ("<pad>", "<s>", "</s>", "<unk>")] == [0, 1, 2, 3]
    assert v.encode(["hello", "world", "nope"]) == [4, 5, 3]
    assert v.decode([1, 4, 5, 2, 4]) == ["hello", "world"]


def test_vocab_add_is_idempotent():
    v = Vocab()
    assert v.add("a") == v.add("a") == 4
    assert len(v) == 5


def test_vocab_file_line_is_id_minus_four(tmp_path):
    v = Vocab(["b", "a", "c"])
    v.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines == ["b", "a", "c"]
    assert Vocab.load(tmp_path / "v.txt") == v


# ------------------------------------------------------------------- jsonl


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_empty_file_is_an_error(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(ValueError, match="empty dataset"):
        load_jsonl(tmp_path / "e.jsonl")


def test_img_length_mismatch_names_both_lengths(tmp_path):
    _write(tmp_path / "d.jsonl", [{"src": "a b", "tgt": "c", "img": [0.0, 1.0, 2.0]}])
    with pytest.raises(ValueError, match="3 != d_image 4"):
        load_jsonl(tmp_path / "d.jsonl", d_image=4)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps({"src": "a", "tgt": "b", "img": [0.0]}) + "\n{not json\n")
    with pytest.raises(ValueError, match=":2:"):
        load_jsonl(p)


def test_missing_field_is_malformed(tmp_path):
    _write(tmp_path / "d.jsonl", [{"src": "a", "img": [0.0]}])
    with pytest.raises(ValueError, match=":1:"):
        load_jsonl(tmp_path / "d.jsonl")


def test_non_finite_image_is_rejected(tmp_path):
    (tmp_path / "d.jsonl").write_text('{"src": "a", "tgt": "b", "img": [NaN]}\n')
    with pytest.raises(ValueError, match="finite"):
        load_jsonl(tmp_path / "d.jsonl")


def test_inconsistent_widths_without_d_image(tmp_path):
    _write(tmp_path / "d.jsonl", [{"src": "a", "tgt": "b", "img": [0.0]},
                                  {"src": "a", "tgt": "b", "img": [0.0, 1.0]}])
    with pytest.raises(ValueError, match="d_image"):
        load_jsonl(tmp_path / "d.jsonl")


def test_round_trip_reproduces_ids(tmp_path):
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=60, n_valid=5, n_test=5))
    write_jsonl(tmp_path / "t.jsonl", train)
    back = load_jsonl(tmp_path / "t.jsonl", train.d_image, train.src_vocab, train.tgt_vocab)
    assert [e.src for e in back] == [e.src for e in train]
    assert [e.tgt for e in back] == [e.tgt for e in train]
    assert all(np.array_equal(a.img, b.img) for a, b in zip(back, train))
    assert [e.meta for e in back] == [e.meta for e in train]


def test_supplied_vocab_maps_unknown_words(tmp_path):
    _write(tmp_path / "d.jsonl", [{"src": "known other", "tgt": "z", "img": [1.0]}])
    ds = load_jsonl(tmp_path / "d.jsonl", 1, Vocab(["known"]), Vocab(["z"]))
    assert ds[0].src == [4, 3]


# ---------------------------------------------------------------- batching


def test_one_batch_when_budget_fits_all():
    assert len(make_batches(toy_dataset([(10, 10)] * 10), 100)) == 1


def test_one_example_per_batch_at_minimal_budget():
    batches = make_batches(toy_dataset([(10, 10)] * 10), 10)
    assert len(batches) == 10 and all(len(b) == 1 for b in batches)


def test_oversized_example_is_an_error():
    with pytest.raises(ValueError, match="max_tokens"):
        make_batches(toy_dataset([(3, 3), (4, 12)]), 10)


def test_batches_are_seeded():
    ds = toy_dataset([(i % 7 + 1, i % 5 + 1) for i in range(40)])
    a = make_batches(ds, 12, seed=1, epoch=2)
    b = make_batches(ds, 12, seed=1, epoch=2)
    c = make_batches(ds, 12, seed=1, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert [x.tolist() for x in a] != [x.tolist() for x in c]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 9), st.integers(1, 9)), min_size=1, max_size=40),
       st.integers(9, 60), st.integers(0, 3))
def test_batching_covers_every_example_once_within_budget(lengths, max_tokens, seed):
    ds = toy_dataset(lengths)
    batches = make_batches(ds, max_tokens, seed=seed)
    ids = Counter(i for b in batches for i in b.tolist())
    assert ids == Counter(range(len(lengths)))
    for b in batches:
        longest = max(max(lengths[i]) for i in b)
        assert len(b) * longest <= max_tokens


def test_collate_shapes_and_markers():
    ds = toy_dataset([(2, 3), (4, 1)])
    b = collate(ds, [0, 1])
    assert b.src.tolist() == [[4, 4, 0, 0], [4, 4, 4, 4]]
    assert b.tgt_in.tolist() == [[1, 5, 5, 5], [1, 5, 0, 0]]
    assert b.tgt_out.tolist() == [[5, 5, 5, 2], [5, 2, 0, 0]]
    assert b.img.shape == (2, 2)


# --------------------------------------------------------------- synthetic


@pytest.fixture(scope="module")
def default_splits():
    return generate_synthetic(SyntheticSpec())


def test_default_split_sizes(default_splits):
    assert [len(s) for s in default_splits] == [2000, 200, 400]


def test_noise_free_images_are_one_hot():
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=50, n_valid=5, n_test=5, noise_sigma=0.0))
    for ex in train:
        assert np.count_nonzero(ex.img) == 1 and ex.img.max() == 1.0
        assert np.linalg.norm(ex.img) == 1.0


def test_senses_are_balanced_per_concept(default_splits):
    counts = Counter((e.meta["concept"], e.meta["sense"]) for e in default_splits[0]
                     if e.meta["kind"] == "concept")
    for k in range(8):
        assert abs(counts[(k, 0)] - counts[(k, 1)]) <= 1
    genders = Counter(e.meta["gender"] for e in default_splits[0] if e.meta["kind"] == "gender")
    assert abs(genders["male"] - genders["female"]) <= 1


def test_nearest_basis_classifier_recovers_sense(default_splits):
    concept = [e for e in default_splits[0] if e.meta["kind"] == "concept"]
    hits = sum(nearest_basis_sense(e.img, 8) == (e.meta["concept"], e.meta["sense"]) for e in concept)
    assert hits / len(concept) > 0.99


def test_gender_fraction_is_respected(default_splits):
    frac = np.mean([e.meta["kind"] == "gender" for e in default_splits[0]])
    assert frac == pytest.approx(0.25, abs=1e-9)


def test_target_is_a_function_of_source_and_sense(default_splits):
    mapping = {}
    for split in default_splits:
        for e in split:
            sense = e.meta.get("sense", e.meta.get("gender"))
            key = (tuple(e.src), sense)
            assert mapping.setdefault(key, tuple(e.tgt)) == tuple(e.tgt)


def test_ambiguous_source_has_both_readings(default_splits):
    train = default_splits[0]
    a0 = train.src_vocab.lookup("a0")
    readings = {train.tgt_vocab.itos[t] for e in train if a0 in e.src for t in e.tgt
                if train.tgt_vocab.itos[t].startswith("t0_")}
    assert readings == {"t0_0", "t0_1"}


def test_splits_are_disjoint(default_splits):
    def keys(ds):
        return {(tuple(e.src), e.meta.get("sense", e.meta.get("gender"))) for e in ds}

    train, valid, test = map(keys, default_splits)
    assert not (train & valid) and not (train & test) and not (valid & test)


def test_capacity_error():
    with pytest.raises(ValueError, match="too small"):
        SyntheticSpec(n_concepts=8, d_image=17)
    SyntheticSpec(n_concepts=8, d_image=18)
    SyntheticSpec(n_concepts=8, d_image=16, gender_fraction=0.0)


def test_regeneration_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_train=120, n_valid=20, n_test=20, seed=4)
    write_synthetic(tmp_path / "a", spec)
    write_synthetic(tmp_path / "b", spec)
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "src.vocab", "tgt.vocab", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = tmp_path / "c"
    write_synthetic(other, SyntheticSpec(n_train=120, n_valid=20, n_test=20, seed=5))
    assert (other / "train.jsonl").read_bytes() != (tmp_path / "a" / "train.jsonl").read_bytes()


def test_manifest_records_spec_and_seed(tmp_path):
    spec = SyntheticSpec(n_train=30, n_valid=4, n_test=4, seed=9)
    write_synthetic(tmp_path, spec)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 9 and man["spec"] == spec.to_dict()
    assert man["counts"] == {"train": 30, "valid": 4, "test": 4}


def test_written_files_load_back(tmp_path):
    spec = SyntheticSpec(n_train=30, n_valid=4, n_test=4)
    write_synthetic(tmp_path, spec)
    src_vocab, tgt_vocab = Vocab.load(tmp_path / "src.vocab"), Vocab.load(tmp_path / "tgt.vocab")
    ds = load_jsonl(tmp_path / "train.jsonl", spec.d_image, src_vocab, tgt_vocab)
    assert len(ds) == 30
    assert all(3 not in e.src and 3 not in e.tgt for e in ds)
