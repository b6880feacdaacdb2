"""Generalized CP loss, derivative and per-entry factor gradients.

The model value of a coordinate ``(s, r, o)`` is the identity-core CP
reconstruction ``m = sum_k A[s, k] * B[r, k] * A[o, k]``.  Entity matrix ``A``
serves both the subject and the object mode.

Gradients are the MTTKRP of the derivative tensor restricted to the observed
entries.  Because that tensor is zero off the observed set, each observed entry
contributes one rank-1 row per mode and nothing dense is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Inconsistent batch or factor-row shapes."""


def softplus(m):
    """``log(1 + exp(m))`` without overflow."""
    m = np.asarray(m)
    return np.maximum(m, 0) + np.log1p(np.exp(-np.abs(m)))


class LossFamily:
    """Elementwise loss ``f(x, m)`` and its derivative ``y = df/dm``."""

    name = "abstract"

    def loss(self, x, m):
        raise NotImplementedError

    def deriv(self, x, m):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Bernoulli(LossFamily):
    """Bernoulli data with logit link: ``f = log(1 + e^m) - x m``."""

    name = "bernoulli"

    def loss(self, x, m):
        # softplus(m) - m == softplus(-m); this form keeps full precision for
        # well-fit positives where softplus(m) and m nearly cancel.
        x = np.asarray(x, dtype=np.result_type(m, np.float32))
        return (1 - x) * softplus(m) + x * softplus(-np.asarray(m))

    def deriv(self, x, m):
        return expit(m) - x


class Gaussian(LossFamily):
    """Squared error, the classical CP-ALS objective."""

    name = "gaussian"

    def loss(self, x, m):
        d = np.asarray(x) - np.asarray(m)
        return d * d

    def deriv(self, x, m):
        return 2 * (np.asarray(m) - np.asarray(x))


FAMILIES = {"bernoulli": Bernoulli(), "gaussian": Gaussian()}


def get_family(family) -> LossFamily:
    if isinstance(family, LossFamily):
        return family
    try:
        return FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown loss family {family!r}; choose from {sorted(FAMILIES)}") from None


def bernoulli_loss(x, m):
    return FAMILIES["bernoulli"].loss(x, m)


def bernoulli_deriv(x, m):
    return FAMILIES["bernoulli"].deriv(x, m)


@dataclass
class FactorModel:
    """Entity matrix ``A`` (n_e x R) and relation matrix ``B`` (n_r x R)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise ShapeError(f"factor shapes {self.A.shape} and {self.B.shape} disagree on rank")
        if self.A.dtype != self.B.dtype:
            raise ShapeError("A and B must share a dtype")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def n_e(self) -> int:
        return self.A.shape[0]

    @property
    def n_r(self) -> int:
        return self.B.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.A.dtype

    @classmethod
    def random(cls, n_e: int, n_r: int, rank: int, rng=None, scale: float = 0.05,
               dtype=np.float32) -> "FactorModel":
        rng = np.random.default_rng(rng)
        A = (rng.standard_normal((n_e, rank)) * scale).astype(dtype)
        B = (rng.standard_normal((n_r, rank)) * scale).astype(dtype)
        return cls(A, B)

    def copy(self) -> "FactorModel":
        return FactorModel(self.A.copy(), self.B.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.A).all() and np.isfinite(self.B).all())

    def predict(self, s, r, o):
        """Model values for (arrays of) coordinates."""
        return np.sum(self.A[s] * self.B[r] * self.A[o], axis=-1)


@dataclass
class Batch:
    """Observed coordinates with their binary labels."""

    inds_a: np.ndarray
    inds_b: np.ndarray
    inds_c: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        n = len(self.inds_a)
        if not (len(self.inds_b) == len(self.inds_c) == len(self.x) == n):
            raise ShapeError(
                "batch arrays differ in length: "
                f"{len(self.inds_a)}, {len(self.inds_b)}, {len(self.inds_c)}, {len(self.x)}"
            )

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_triples(cls, triples, labels) -> "Batch":
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return cls(t[:, 0].copy(), t[:, 1].copy(), t[:, 2].copy(), np.asarray(labels))

    def split(self, n_parts: int) -> list["Batch"]:
        cuts = np.array_split(np.arange(len(self)), n_parts)
        return [Batch(self.inds_a[c], self.inds_b[c], self.inds_c[c], self.x[c]) for c in cuts]


@dataclass
class GradSlices:
    """Gradient rows aligned to a batch's index lists, plus the batch loss."""

    g_a: np.ndarray
    g_b: np.ndarray
    g_c: np.ndarray
    loss: float


def predict_entry(a_s, b_r, a_o) -> float:
    a_s, b_r, a_o = (np.asarray(v) for v in (a_s, b_r, a_o))
    if not (a_s.shape == b_r.shape == a_o.shape):
        raise ShapeError("rows must have equal length")
    return float(np.sum(a_s * b_r * a_o))


def gcp_grad(batch: Batch, a_rows_s, b_rows, a_rows_o, family="bernoulli") -> GradSlices:
    """Loss and per-entry gradient rows for one batch.

    Row ``i`` of ``g_a`` is ``y_i * (b_rows[i] * a_rows_o[i])``, i.e. the
    contribution of entry ``i`` to the mode-0 MTTKRP; likewise for ``g_b``
    and ``g_c``.  Callers scatter-add the rows into the factor gradients.
    Transient memory is O(L * R) and independent of the vocabulary sizes.
    """
    family = get_family(family)
    L = len(batch)
    for name, rows in (("a_rows_s", a_rows_s), ("b_rows", b_rows), ("a_rows_o", a_rows_o)):
        if rows.ndim != 2 or rows.shape[0] != L:
            raise ShapeError(f"{name} has shape {rows.shape}, expected ({L}, R)")
    if not (a_rows_s.shape == b_rows.shape == a_rows_o.shape):
        raise ShapeError(
            f"row blocks disagree: {a_rows_s.shape}, {b_rows.shape}, {a_rows_o.shape}"
        )

    g_a = b_rows * a_rows_o
    m = np.einsum("ij,ij->i", a_rows_s, g_a)
    x = batch.x.astype(m.dtype, copy=False)
    loss = float(np.sum(family.loss(x, m), dtype=np.float64))
    y = family.deriv(x, m)[:, None]

    g_b = a_rows_s * a_rows_o
    g_b *= y
    g_c = a_rows_s * b_rows
    g_c *= y
    g_a *= y
    return GradSlices(g_a, g_b, g_c, loss)


def full_loss(model: FactorModel, omega: Batch, family="bernoulli") -> float:
    """Exact ``sum_{i in omega} f(x_i, m_i)`` (correctly rounded sum)."""
    if len(omega) == 0:
        return 0.0
    family = get_family(family)
    m = model.predict(omega.inds_a, omega.inds_b, omega.inds_c)
    return math.fsum(family.loss(omega.x.astype(m.dtype), m).tolist())


def scatter_gradients(batch: Batch, grads: GradSlices, n_e: int, n_r: int):
    """Dense ``(G_A, G_B)`` from one batch; subject and object rows both land in ``G_A``.

    Allocates full-size matrices, so it is meant for checks, not training.
    """
    R = grads.g_a.shape[1]
    GA = np.zeros((n_e, R), dtype=np.float64)
    GB = np.zeros((n_r, R), dtype=np.float64)
    np.add.at(GA, batch.inds_a, grads.g_a)
    np.add.at(GA, batch.inds_c, grads.g_c)
    np.add.at(GB, batch.inds_b, grads.g_b)
    return GA, GB


def model_gradient(model: FactorModel, omega: Batch, family="bernoulli", batch_size=None):
    """Gradient of the total loss over ``omega``, accumulated batch by batch."""
    n_parts = 1 if not batch_size else max(1, math.ceil(len(omega) / batch_size))
    GA = np.zeros(model.A.shape, dtype=np.float64)
    GB = np.zeros(model.B.shape, dtype=np.float64)
    total = 0.0
    for part in omega.split(n_parts):
        g = gcp_grad(part, model.A[part.inds_a], model.B[part.inds_b], model.A[part.inds_c], family)
        ga, gb = scatter_gradients(part, g, model.n_e, model.n_r)
        GA += ga
        GB += gb
        total += g.loss
    return GA, GB, total
