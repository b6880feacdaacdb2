import numpy as np
import pytest

from gcpkge.data_io import (
    HEADER,
    BadMagicError,
    DatasetFormatError,
    FloatWidthMismatchError,
    TruncatedArtifactError,
    UnseenLabelError,
    UnsupportedVersionError,
    ArtifactError,
    dataset_stats,
    export_tsv,
    label_paths,
    load_dataset,
    load_dataset_dir,
    load_labels,
    load_model,
    read_header,
    save_model,
)
from gcpkge.gcp import FactorModel
from gcpkge.trainer import TrainConfig

from conftest import write_tsv

TRAIN = [("a", "likes", "b"), ("b", "likes", "c"), ("c", "knows", "a"), ("a", "likes", "b")]
VALID = [("a", "knows", "c")]
TEST = [("b", "knows", "a"), ("d", "likes", "a")]


@pytest.fixture
def toy_dir(tmp_path):
    write_tsv(tmp_path / "train.txt", TRAIN)
    write_tsv(tmp_path / "valid.txt", VALID)
    write_tsv(tmp_path / "test.txt", TEST)
    return tmp_path


def test_loads_toy_splits(toy_dir):
    b = load_dataset_dir(toy_dir)
    assert b.entities.labels == ["a", "b", "c", "d"]
    assert b.relations.labels == ["likes", "knows"]
    assert len(b.train) == 3 and b.train.n_duplicates == 1
    assert b.train.triples.tolist() == [[0, 0, 1], [1, 0, 2], [2, 1, 0]]
    assert b.test.triples.tolist() == [[1, 1, 0], [3, 0, 0]]
    assert b.train.n_e == b.test.n_e == 4


def test_crlf_line_endings(tmp_path):
    write_tsv(tmp_path / "train.txt", TRAIN, newline="\r\n")
    write_tsv(tmp_path / "valid.txt", VALID, newline="\r\n")
    write_tsv(tmp_path / "test.txt", TEST[:1], newline="\r\n")
    b = load_dataset_dir(tmp_path)
    assert b.relations.labels == ["likes", "knows"]
    assert not any(lab.endswith("\r") for lab in b.entities.labels)


def test_malformed_line_reports_number(toy_dir):
    (toy_dir / "train.txt").write_text("a\tr\tb\nbroken line\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError) as exc:
        load_dataset_dir(toy_dir)
    assert exc.value.line == 2
    assert "train.txt:2" in str(exc.value)


def test_strict_rejects_unseen(toy_dir):
    with pytest.raises(UnseenLabelError, match="test.txt:2"):
        load_dataset_dir(toy_dir, unseen="strict")


def test_lenient_skips_unseen(toy_dir):
    b = load_dataset_dir(toy_dir, unseen="lenient")
    assert len(b.entities) == 3
    assert len(b.test) == 1
    assert b.provenance["skipped"] == {"valid": 0, "test": 1}


def test_unknown_unseen_mode(toy_dir):
    with pytest.raises(ValueError):
        load_dataset_dir(toy_dir, unseen="maybe")


def test_stats(toy_dir):
    write_tsv(toy_dir / "valid.txt", VALID + [("a", "likes", "b")])
    stats = dataset_stats(load_dataset_dir(toy_dir))
    assert stats["n_entities"] == 4 and stats["n_relations"] == 2
    assert (stats["n_train"], stats["n_valid"], stats["n_test"]) == (3, 2, 2)
    assert stats["duplicates"]["train"] == 1
    assert stats["overlap_train_valid"] == 1
    assert stats["overlap_train_test"] == 0


def test_provenance_records_digests(toy_dir):
    b = load_dataset_dir(toy_dir)
    assert set(b.provenance["digests"]) == {"train", "valid", "test"}
    assert all(len(d) == 64 for d in b.provenance["digests"].values())


# -- artifacts ---------------------------------------------------------------------


@pytest.fixture
def model32(rng):
    return FactorModel(rng.normal(size=(7, 3)).astype(np.float32),
                       rng.normal(size=(2, 3)).astype(np.float32))


def test_round_trip_is_bitwise(tmp_path, model32):
    cfg = TrainConfig(rank=3, seed=9)
    p = save_model(model32, cfg, tmp_path / "m.kge")
    loaded, digest = load_model(p)
    assert loaded.A.tobytes() == model32.A.tobytes()
    assert loaded.B.tobytes() == model32.B.tobytes()
    assert loaded.dtype == np.float32
    assert digest == cfg.digest().hex()
    h = read_header(p.read_bytes())
    assert (h.n_e, h.n_r, h.rank, h.seed, h.float_width) == (7, 2, 3, 9, 4)
    assert p.stat().st_size == HEADER.size + (7 + 2) * 3 * 4


def test_float64_round_trip(tmp_path, rng):
    model = FactorModel(rng.normal(size=(4, 2)), rng.normal(size=(1, 2)))
    loaded, _ = load_model(save_model(model, None, tmp_path / "m.kge"))
    assert loaded.A.tobytes() == model.A.tobytes() and loaded.dtype == np.float64


def test_truncation_detected(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(TruncatedArtifactError, match="truncated matrix section"):
        load_model(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "m.kge"
    p.write_bytes(b"GCPKGE\x01\x00")
    with pytest.raises(TruncatedArtifactError):
        load_model(p)


def test_trailing_bytes_rejected(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ArtifactError, match="trailing"):
        load_model(p)


def test_bad_magic(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    data = bytearray(p.read_bytes())
    data[0:6] = b"NOTKGE"
    p.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        load_model(p)


def test_unsupported_version(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    data = bytearray(p.read_bytes())
    data[6:8] = (7).to_bytes(2, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersionError):
        load_model(p)


def test_width_conversion_needs_opt_in(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    with pytest.raises(FloatWidthMismatchError):
        load_model(p, dtype=np.float64)
    m64, _ = load_model(p, dtype=np.float64, convert=True)
    assert m64.dtype == np.float64
    np.testing.assert_array_equal(m64.A, model32.A.astype(np.float64))


def test_labels_written_alongside(tmp_path, model32):
    ents = [f"e{i}" for i in range(7)]
    p = save_model(model32, None, tmp_path / "m.kge", entities=ents, relations=["r0", "r1"])
    ent_path, rel_path = label_paths(p)
    assert ent_path.name == "m.entities.txt" and rel_path.name == "m.relations.txt"
    got_e, got_r = load_labels(p)
    assert got_e == ents and got_r == ["r0", "r1"]
    assert len(set(got_e)) == len(got_e)


def test_overwrite_is_atomic(tmp_path, model32):
    p = save_model(model32, None, tmp_path / "m.kge")
    save_model(model32, None, p)
    assert sorted(x.name for x in tmp_path.iterdir()) == ["m.kge"]


def test_export_tsv(tmp_path, model32):
    e, r = export_tsv(model32, tmp_path / "out", relations=["x", "y"])
    lines = e.read_text().splitlines()
    assert len(lines) == 7
    fields = lines[2].split("\t")
    assert fields[0] == "2"
    np.testing.assert_array_equal(np.array(fields[1:], dtype=np.float32), model32.A[2])
    assert r.read_text().splitlines()[1].startswith("y\t")


def test_dataset_paths_passed_individually(toy_dir):
    b = load_dataset(toy_dir / "train.txt", toy_dir / "valid.txt", toy_dir / "test.txt")
    assert b.provenance["line_counts"] == {"train": 4, "valid": 1, "test": 2}
