"""Dataset loading, split statistics and the ``.kge`` embedding artifact.

Artifact layout (all integers little-endian)::

    offset  size  field
    0       6     magic  b"GCPKGE"
    6       2     format version (uint16, currently 1)
    8       2     float width in bytes (uint16, 4 or 8)
    10      2     reserved, zero
    12      8     n_e   (uint64)
    20      8     n_r   (uint64)
    28      8     rank  (uint64)
    36      8     seed  (uint64)
    44      32    sha256 digest of the training config text
    76      ...   A, row-major, n_e * rank floats
    ...     ...   B, row-major, n_r * rank floats

Labels live next to the binary in ``<stem>.entities.txt`` and
``<stem>.relations.txt``, one label per line, line i holding id i.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gcp import FactorModel
from .tensor_core import TripleStore, Vocabulary, build_store

log = logging.getLogger(__name__)

MAGIC = b"GCPKGE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<6sHHHQQQQ32s")
FLOAT_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
SPLITS = ("train", "valid", "test")


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class UnseenLabelError(ValueError):
    pass


class ArtifactError(ValueError):
    """Base class for unreadable ``.kge`` files."""


class BadMagicError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass


class TruncatedArtifactError(ArtifactError):
    pass


class DimensionOverflowError(ArtifactError):
    pass


class FloatWidthMismatchError(ArtifactError):
    pass


# -- datasets ---------------------------------------------------------------------


def read_triples(path) -> list[tuple[str, str, str]]:
    """Labels from a tab-separated triple file; ``\\r\\n`` endings are accepted."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise DatasetFormatError(path, lineno, f"expected 3 tab-separated fields, got {line!r}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


@dataclass
class DatasetBundle:
    train: TripleStore
    valid: TripleStore
    test: TripleStore
    entities: Vocabulary
    relations: Vocabulary
    provenance: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, TripleStore]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def load_dataset(train_path, valid_path, test_path, unseen: str = "extend") -> DatasetBundle:
    """Read three TSV splits into stores sharing one vocabulary.

    Ids follow first appearance in ``train``.  Labels first met in valid/test
    are handled by ``unseen``: ``"extend"`` appends them to the vocabulary,
    ``"strict"`` raises :class:`UnseenLabelError`, ``"lenient"`` drops those
    triples and counts them in ``provenance["skipped"]``.
    """
    if unseen not in ("extend", "strict", "lenient"):
        raise ValueError(f"unseen must be 'extend', 'strict' or 'lenient', got {unseen!r}")
    paths = dict(zip(SPLITS, (train_path, valid_path, test_path)))
    raw = {name: read_triples(p) for name, p in paths.items()}

    ents, rels = Vocabulary(), Vocabulary()
    for s, r, o in raw["train"]:
        ents.add(s)
        rels.add(r)
        ents.add(o)

    ids = {"train": [(ents.id(s), rels.id(r), ents.id(o)) for s, r, o in raw["train"]]}
    skipped = {"valid": 0, "test": 0}
    for name in ("valid", "test"):
        out = []
        for lineno, (s, r, o) in enumerate(raw[name], 1):
            missing = [x for x, voc in ((s, ents), (r, rels), (o, ents)) if x not in voc]
            if missing:
                if unseen == "strict":
                    raise UnseenLabelError(
                        f"{paths[name]}:{lineno}: label(s) {missing} not seen in training split"
                    )
                if unseen == "lenient":
                    skipped[name] += 1
                    continue
            out.append((ents.add(s), rels.add(r), ents.add(o)))
        ids[name] = out
    if any(skipped.values()):
        log.warning("skipped evaluation triples with unseen labels: %s", skipped)

    n_e, n_r = len(ents), len(rels)
    stores = {name: build_store(ids[name], n_e, n_r) for name in SPLITS}
    provenance = {
        "paths": {k: str(v) for k, v in paths.items()},
        "line_counts": {k: len(v) for k, v in raw.items()},
        "duplicates": {k: stores[k].n_duplicates for k in SPLITS},
        "skipped": skipped,
        "digests": {k: file_digest(v) for k, v in paths.items()},
    }
    return DatasetBundle(stores["train"], stores["valid"], stores["test"], ents, rels, provenance)


def load_dataset_dir(directory, unseen: str = "extend") -> DatasetBundle:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from one directory."""
    d = Path(directory)
    return load_dataset(d / "train.txt", d / "valid.txt", d / "test.txt", unseen=unseen)


def dataset_stats(bundle: DatasetBundle) -> dict:
    keys = {}
    for name, st in bundle.splits.items():
        keys[name] = set((st.triples[:, 0] * st.n_r + st.triples[:, 1]) * st.n_e + st.triples[:, 2]) \
            if len(st) else set()
    return {
        "n_entities": len(bundle.entities),
        "n_relations": len(bundle.relations),
        "n_train": len(bundle.train),
        "n_valid": len(bundle.valid),
        "n_test": len(bundle.test),
        "duplicates": dict(bundle.provenance.get("duplicates", {})),
        "skipped_unseen": dict(bundle.provenance.get("skipped", {})),
        "overlap_train_valid": len(keys["train"] & keys["valid"]),
        "overlap_train_test": len(keys["train"] & keys["test"]),
        "overlap_valid_test": len(keys["valid"] & keys["test"]),
    }


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def labels_digest(labels) -> str:
    return hashlib.sha256("\n".join(labels).encode()).hexdigest()


# -- artifacts --------------------------------------------------------------------


def label_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix == ".kge" else p
    return Path(f"{stem}.entities.txt"), Path(f"{stem}.relations.txt")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_model(model: FactorModel, config, path, entities=None, relations=None) -> Path:
    """Write the ``.kge`` artifact (and label files when vocabularies are given).

    ``config`` is a :class:`~gcpkge.trainer.TrainConfig` (its digest and seed go
    in the header) or ``None``.
    """
    path = Path(path)
    width = model.dtype.itemsize
    if width not in FLOAT_DTYPES:
        raise ArtifactError(f"unsupported float width {width}")
    digest = config.digest() if config is not None else bytes(32)
    seed = config.seed if config is not None else 0
    header = HEADER.pack(MAGIC, FORMAT_VERSION, width, 0, model.n_e, model.n_r, model.rank,
                         seed, digest)
    dt = FLOAT_DTYPES[width]
    payload = b"".join([
        header,
        np.ascontiguousarray(model.A, dtype=dt).tobytes(),
        np.ascontiguousarray(model.B, dtype=dt).tobytes(),
    ])
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, payload)
    ent_path, rel_path = label_paths(path)
    for labels, lp in ((entities, ent_path), (relations, rel_path)):
        if labels is not None:
            labels = labels.labels if isinstance(labels, Vocabulary) else list(labels)
            _atomic_write(lp, "".join(f"{x}\n" for x in labels).encode())
    return path


@dataclass
class ArtifactHeader:
    version: int
    float_width: int
    n_e: int
    n_r: int
    rank: int
    seed: int
    config_digest: bytes


def read_header(buf: bytes) -> ArtifactHeader:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a .kge artifact (bad magic)")
    if len(buf) < HEADER.size:
        raise TruncatedArtifactError("truncated header")
    magic, version, width, _, n_e, n_r, rank, seed, digest = HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported artifact version {version}")
    if width not in FLOAT_DTYPES:
        raise ArtifactError(f"unsupported float width {width}")
    return ArtifactHeader(version, width, n_e, n_r, rank, seed, digest)


def load_model(path, dtype=None, convert: bool = False):
    """Read a ``.kge`` artifact; returns ``(FactorModel, config_digest_hex)``.

    Asking for a ``dtype`` other than the stored width fails unless
    ``convert=True``.
    """
    buf = Path(path).read_bytes()
    h = read_header(buf)
    sizes = []
    for rows in (h.n_e, h.n_r):
        n = rows * h.rank * h.float_width
        if n >= 1 << 63:
            raise DimensionOverflowError(f"matrix of {rows} x {h.rank} overflows")
        sizes.append(n)
    expected = HEADER.size + sizes[0] + sizes[1]
    if len(buf) < expected:
        raise TruncatedArtifactError(
            f"truncated matrix section: expected {expected} bytes, file has {len(buf)}"
        )
    if len(buf) > expected:
        raise ArtifactError(f"{len(buf) - expected} trailing bytes after matrix sections")
    dt = FLOAT_DTYPES[h.float_width]
    A = np.frombuffer(buf, dtype=dt, count=h.n_e * h.rank, offset=HEADER.size)
    B = np.frombuffer(buf, dtype=dt, count=h.n_r * h.rank, offset=HEADER.size + sizes[0])
    A = A.reshape(h.n_e, h.rank).astype(dt.newbyteorder("="), copy=True)
    B = B.reshape(h.n_r, h.rank).astype(dt.newbyteorder("="), copy=True)
    if dtype is not None and np.dtype(dtype) != A.dtype:
        if not convert:
            raise FloatWidthMismatchError(
                f"artifact stores {h.float_width}-byte floats; pass convert=True to load as {np.dtype(dtype)}"
            )
        A, B = A.astype(dtype), B.astype(dtype)
    return FactorModel(A, B), h.config_digest.hex()


def load_labels(path) -> tuple[list[str] | None, list[str] | None]:
    out = []
    for lp in label_paths(path):
        out.append(lp.read_text(encoding="utf-8").splitlines() if lp.exists() else None)
    return out[0], out[1]


def export_tsv(model: FactorModel, out_dir, entities=None, relations=None) -> tuple[Path, Path]:
    """Write ``entities.tsv`` / ``relations.tsv``: label then the vector, tab-separated."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, M, labels in (("entities", model.A, entities), ("relations", model.B, relations)):
        labels = labels if labels is not None else [str(i) for i in range(len(M))]
        p = out_dir / f"{name}.tsv"
        with open(p, "w", encoding="utf-8") as fh:
            for label, row in zip(labels, M):
                fh.write(label + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        written.append(p)
    return written[0], written[1]
