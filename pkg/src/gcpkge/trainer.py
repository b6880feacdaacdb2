"""Epoch loop: shuffled positives, sampled negatives, sparse AdamW row updates."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numba
import numpy as np

from .gcp import Batch, FactorModel, GradSlices, gcp_grad, get_family
from .memory import TransientMeter
from .tensor_core import TripleStore

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """One or more invalid configuration values; ``errors`` lists all of them."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    rank: int = 200
    learning_rate: float = 0.01
    batch_size: int = 128
    n_negatives: int = 6
    l2_coeff: float = 0.0
    lr_decay_step: int = 10
    lr_decay_gamma: float = 1.0
    n_epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    init_scale: float = 0.05
    precision: str = "float32"
    loss: str = "bernoulli"
    filtered_negatives: bool = False
    deterministic: bool = True
    memory_probe: bool = True

    def validate(self) -> "TrainConfig":
        errors = []
        if self.rank < 1:
            errors.append(f"rank must be >= 1 (got {self.rank})")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.n_negatives < 0:
            errors.append(f"n_negatives must be >= 0 (got {self.n_negatives})")
        if not 0 < self.lr_decay_gamma <= 1:
            errors.append(f"lr_decay_gamma must be in (0, 1] (got {self.lr_decay_gamma})")
        if self.lr_decay_step < 1:
            errors.append(f"lr_decay_step must be >= 1 (got {self.lr_decay_step})")
        if self.learning_rate < 0:
            errors.append(f"learning_rate must be >= 0 (got {self.learning_rate})")
        if self.l2_coeff < 0:
            errors.append(f"l2_coeff must be >= 0 (got {self.l2_coeff})")
        if self.n_epochs < 0:
            errors.append(f"n_epochs must be >= 0 (got {self.n_epochs})")
        if self.seed < 0:
            errors.append(f"seed must be >= 0 (got {self.seed})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            errors.append(f"epsilon must be > 0 (got {self.epsilon})")
        if self.init_scale <= 0:
            errors.append(f"init_scale must be > 0 (got {self.init_scale})")
        if self.precision not in PRECISIONS:
            errors.append(f"precision must be one of {sorted(PRECISIONS)} (got {self.precision!r})")
        if self.loss not in ("bernoulli", "gaussian"):
            errors.append(f"loss must be 'bernoulli' or 'gaussian' (got {self.loss!r})")
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def entries_per_batch(self) -> int:
        return self.batch_size * (1 + self.n_negatives)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Coerce string values to field types, collecting every error."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes, errors = {}, []
        for key, raw in values.items():
            if key not in types:
                errors.append(f"unknown key {key!r}")
                continue
            try:
                changes[key] = _coerce(raw, types[key])
            except ValueError:
                errors.append(f"{key}: cannot parse {raw!r} as {types[key].__name__}")
        if errors:
            raise ConfigError(errors)
        return dataclasses.replace(base, **changes)


def _coerce(raw, typ):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raise ValueError(raw)
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr * gamma ** (epoch // step)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.learning_rate * config.lr_decay_gamma ** (epoch // config.lr_decay_step)


# -- negative sampling -------------------------------------------------------


class NegativeSampler:
    """Corrupts subject or object (probability 1/2 each) with a uniform other entity.

    With ``filter_store`` set, corruptions that hit a known triple are redrawn
    up to ``max_tries`` times.
    """

    def __init__(self, n_e: int, rng=None, filter_store: TripleStore | None = None,
                 max_tries: int = 10):
        if n_e < 2:
            raise ValueError(f"need at least 2 entities to corrupt a triple (n_e={n_e})")
        self.n_e = n_e
        self.rng = np.random.default_rng(rng)
        self.filter_store = filter_store
        self.max_tries = max_tries

    def _draw(self, original: np.ndarray) -> np.ndarray:
        repl = self.rng.integers(0, self.n_e - 1, size=original.shape)
        repl += repl >= original
        return repl

    def corrupt(self, positives: np.ndarray, n: int) -> np.ndarray:
        """``(B, n, 3)`` corruptions for a ``(B, 3)`` block of positives."""
        positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
        neg = np.repeat(positives[:, None, :], n, axis=1)
        if n == 0 or len(positives) == 0:
            return neg
        slot = np.where(self.rng.random(neg.shape[:2]) < 0.5, 0, 2)
        b, j = np.indices(slot.shape)
        neg[b, j, slot] = self._draw(neg[b, j, slot])
        if self.filter_store is not None:
            flat = neg.reshape(-1, 3)
            flat_slot = slot.reshape(-1)
            orig = np.repeat(positives, n, axis=0)
            for _ in range(self.max_tries):
                hit = np.flatnonzero(self.filter_store.contains_many(flat))
                if len(hit) == 0:
                    break
                cols = flat_slot[hit]
                flat[hit, cols] = self._draw(orig[hit, cols])
        return neg


def sample_negatives(triple, n: int, rng=None, n_e: int | None = None,
                     sampler: NegativeSampler | None = None) -> np.ndarray:
    """``n`` corrupted copies of ``triple`` as an ``(n, 3)`` array (all label 0)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if sampler is None:
        if n_e is None:
            raise ValueError("pass n_e or a sampler")
        sampler = NegativeSampler(n_e, rng)
    return sampler.corrupt(np.asarray([triple]), n)[0]


def make_batches(positives: np.ndarray, sampler: NegativeSampler, batch_size: int,
                 n_negatives: int, rng=None) -> Iterator[Batch]:
    """Yield batches of ``batch_size`` positives, each followed by its corruptions.

    If ``rng`` is given the positives are shuffled first.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    if rng is not None:
        positives = positives[rng.permutation(len(positives))]
    pattern = np.zeros(1 + n_negatives, dtype=np.int8)
    pattern[0] = 1
    for start in range(0, len(positives), batch_size):
        chunk = positives[start:start + batch_size]
        neg = sampler.corrupt(chunk, n_negatives)
        block = np.concatenate([chunk[:, None, :], neg], axis=1).reshape(-1, 3)
        yield Batch(block[:, 0], block[:, 1], block[:, 2], np.tile(pattern, len(chunk)))


# -- optimizer -----------------------------------------------------------------


class _RowWorkspace:
    """Preallocated buffers so a step allocates nothing sized by the vocabulary."""

    def __init__(self, capacity: int, rank: int, dtype):
        self.capacity = capacity
        self.g = np.empty((capacity, rank), dtype=dtype)
        self.p = np.empty((capacity, rank), dtype=dtype)
        self.m = np.empty((capacity, rank), dtype=dtype)
        self.v = np.empty((capacity, rank), dtype=dtype)
        self.tmp = np.empty((capacity, rank), dtype=dtype)
        self.tmp2 = np.empty((capacity, rank), dtype=dtype)
        self.t = np.empty(capacity, dtype=np.int64)
        self.bc1 = np.empty(capacity, dtype=np.float64)
        self.bc2 = np.empty(capacity, dtype=np.float64)


@dataclass
class OptimizerState:
    """AdamW moments and per-row step counters shaped like the factors."""

    m_A: np.ndarray
    v_A: np.ndarray
    t_A: np.ndarray
    m_B: np.ndarray
    v_B: np.ndarray
    t_B: np.ndarray
    _ws: dict = field(default_factory=dict, repr=False)

    @classmethod
    def zeros_like(cls, model: FactorModel) -> "OptimizerState":
        return cls(
            np.zeros_like(model.A), np.zeros_like(model.A), np.zeros(model.n_e, dtype=np.int64),
            np.zeros_like(model.B), np.zeros_like(model.B), np.zeros(model.n_r, dtype=np.int64),
        )

    def reserve(self, batch_len: int, rank: int, dtype) -> None:
        """Size the entity (2L rows) and relation (L rows) workspaces."""
        for key, cap in (("A", 2 * batch_len), ("B", batch_len)):
            ws = self._ws.get(key)
            if ws is None or ws.capacity < cap or ws.g.dtype != dtype or ws.g.shape[1] != rank:
                self._ws[key] = _RowWorkspace(cap, rank, dtype)
                # compile/load the kernel for this dtype outside any measured step
                _scatter_add(self._ws[key].g[:1], np.zeros(1, dtype=np.int64), self._ws[key].tmp[:1])


def _adamw_rows(P, M, V, T, rows, g, ws: _RowWorkspace, lr, config: TrainConfig, name: str):
    n = len(rows)
    b1, b2 = config.beta1, config.beta2
    m = np.take(M, rows, axis=0, out=ws.m[:n])
    v = np.take(V, rows, axis=0, out=ws.v[:n])
    t = np.take(T, rows, out=ws.t[:n])
    t += 1
    theta = np.take(P, rows, axis=0, out=ws.p[:n])
    tmp, tmp2 = ws.tmp[:n], ws.tmp2[:n]

    m *= b1
    np.multiply(g, 1 - b1, out=tmp)
    m += tmp
    v *= b2
    np.multiply(g, g, out=tmp)
    tmp *= 1 - b2
    v += tmp

    bc1 = np.power(b1, t, out=ws.bc1[:n])
    np.subtract(1.0, bc1, out=bc1)
    bc2 = np.power(b2, t, out=ws.bc2[:n])
    np.subtract(1.0, bc2, out=bc2)
    np.divide(m, bc1[:, None], out=tmp, casting="same_kind")
    np.divide(v, bc2[:, None], out=tmp2, casting="same_kind")
    np.sqrt(tmp2, out=tmp2)
    tmp2 += config.epsilon
    tmp /= tmp2
    if config.l2_coeff:
        np.multiply(theta, config.l2_coeff, out=tmp2)
        tmp += tmp2
    tmp *= lr
    theta -= tmp

    if not np.isfinite(theta).all():
        bad = int(rows[np.flatnonzero(~np.isfinite(theta).all(axis=1))[0]])
        raise TrainingDiverged(f"non-finite value after update in {name} row {bad}")
    P[rows] = theta
    M[rows] = m
    V[rows] = v
    T[rows] = t


@numba.njit(cache=True, nogil=True)
def _scatter_add(out, idx, rows):
    n_cols = rows.shape[1]
    for i in range(idx.shape[0]):
        j = idx[i]
        for k in range(n_cols):
            out[j, k] += rows[i, k]


def _segment_sum(inv: np.ndarray, blocks, ws: _RowWorkspace, n_rows: int) -> np.ndarray:
    """Sum rows of ``blocks`` sharing a value of ``inv``, in a fixed order."""
    out = ws.g[:n_rows]
    out.fill(0)
    start = 0
    for block in blocks:
        _scatter_add(out, inv[start:start + len(block)], block)
        start += len(block)
    return out


def apply_update(model: FactorModel, opt: OptimizerState, batch: Batch, grads: GradSlices,
                 lr: float, config: TrainConfig) -> None:
    """Scatter-add gradient rows per unique index, then AdamW on those rows only.

    Subject and object rows of ``A`` are summed together, so an entity that
    appears in both roles gets its full gradient.
    """
    L = len(batch)
    opt.reserve(L, model.rank, model.dtype)
    ws_a, ws_b = opt._ws["A"], opt._ws["B"]

    ent_rows, inv = np.unique(np.concatenate([batch.inds_a, batch.inds_c]), return_inverse=True)
    ga = _segment_sum(inv, (grads.g_a, grads.g_c), ws_a, len(ent_rows))
    rel_rows, rinv = np.unique(batch.inds_b, return_inverse=True)
    gb = _segment_sum(rinv, (grads.g_b,), ws_b, len(rel_rows))

    _adamw_rows(model.A, opt.m_A, opt.v_A, opt.t_A, ent_rows, ga, ws_a, lr, config, "entity")
    _adamw_rows(model.B, opt.m_B, opt.v_B, opt.t_B, rel_rows, gb, ws_b, lr, config, "relation")


def train_step(model: FactorModel, opt: OptimizerState, batch: Batch, lr: float,
               config: TrainConfig) -> float:
    grads = gcp_grad(
        batch, model.A[batch.inds_a], model.B[batch.inds_b], model.A[batch.inds_c], config.loss
    )
    if not math.isfinite(grads.loss):
        raise TrainingDiverged(f"non-finite batch loss {grads.loss}")
    apply_update(model, opt, batch, grads, lr, config)
    return grads.loss


# -- training loop ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float  # exact sum over processed entries
    n_entries: int
    mean_loss: float
    wall_time: float
    peak_transient_bytes: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


Callback = Callable[[EpochRecord, FactorModel], None]


def init_model(n_e: int, n_r: int, config: TrainConfig) -> FactorModel:
    init_seed = np.random.SeedSequence(config.seed).spawn(3)[0]
    return FactorModel.random(n_e, n_r, config.rank, rng=np.random.default_rng(init_seed),
                              scale=config.init_scale, dtype=config.dtype)


def train(store: TripleStore, config: TrainConfig, callbacks: Iterable[Callback] = (),
          model: FactorModel | None = None, filter_store: TripleStore | None = None) -> FactorModel:
    """Factorize the triple tensor; returns the trained factors.

    Fully determined by ``config.seed``.  Each callback receives the
    :class:`EpochRecord` and the live model after every epoch.
    """
    config.validate()
    get_family(config.loss)
    if len(store) == 0:
        raise ValueError("cannot train on an empty triple store")
    _, shuffle_seed, neg_seed = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = init_model(store.n_e, store.n_r, config)
    elif (model.n_e, model.n_r, model.rank) != (store.n_e, store.n_r, config.rank):
        raise ValueError("initial model does not match store/config dimensions")
    shuffle_rng = np.random.default_rng(shuffle_seed)
    sampler = NegativeSampler(
        store.n_e, np.random.default_rng(neg_seed),
        filter_store=(filter_store or store) if config.filtered_negatives else None,
    )
    opt = OptimizerState.zeros_like(model)
    opt.reserve(config.entries_per_batch, config.rank, model.dtype)
    callbacks = list(callbacks)

    for epoch in range(config.n_epochs):
        lr = lr_at_epoch(config, epoch)
        t0 = time.perf_counter()
        total, n_entries, peak = 0.0, 0, 0
        batches = make_batches(store.triples, sampler, config.batch_size, config.n_negatives,
                               rng=shuffle_rng)
        for i, batch in enumerate(batches):
            if config.memory_probe and i == 0:
                with TransientMeter() as meter:
                    total += train_step(model, opt, batch, lr, config)
                peak = meter.peak
            else:
                total += train_step(model, opt, batch, lr, config)
            n_entries += len(batch)
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite epoch loss at epoch {epoch}")
        record = EpochRecord(epoch, lr, total, n_entries, total / max(n_entries, 1),
                             time.perf_counter() - t0, peak)
        log.info("epoch %d lr %.6g mean loss %.6f (%.1fs)", epoch, lr, record.mean_loss,
                 record.wall_time)
        for cb in callbacks:
            cb(record, model)
    return model


def step_transient_bytes(store: TripleStore, config: TrainConfig, warmup: int = 2) -> int:
    """Peak transient bytes of one training step after ``warmup`` steps."""
    config.validate()
    model = init_model(store.n_e, store.n_r, config)
    opt = OptimizerState.zeros_like(model)
    opt.reserve(config.entries_per_batch, config.rank, model.dtype)
    sampler = NegativeSampler(store.n_e, np.random.default_rng(config.seed))
    rng = np.random.default_rng(config.seed)
    batches = make_batches(store.triples, sampler, config.batch_size, config.n_negatives, rng=rng)
    for _ in range(warmup):
        train_step(model, opt, next(batches), config.learning_rate, config)
    batch = next(batches)
    with TransientMeter() as meter:
        train_step(model, opt, batch, config.learning_rate, config)
    return meter.peak

