"""Reference computations used to check the sparse gradient kernel.

Nothing here shares code with :func:`gcpkge.gcp.gcp_grad`; these routines
go through the objective itself (finite differences) or through dense
matricized tensors and Khatri-Rao products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gcp import Batch, FactorModel, full_loss, get_family, model_gradient


def khatri_rao(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row ``i * V.shape[0] + j`` is ``U[i] * V[j]``."""
    if U.shape[1] != V.shape[1]:
        raise ValueError("matrices need the same number of columns")
    return (U[:, None, :] * V[None, :, :]).reshape(-1, U.shape[1])


def unfold(T: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n matricization with the remaining modes in increasing order (C order)."""
    return np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1)


def cp_full(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("ir,jr,kr->ijk", A, B, C)


def dense_cp_gradient(model: FactorModel, X: np.ndarray, W: np.ndarray, family="bernoulli"):
    """Gradient of ``sum W * f(X, M)`` via dense MTTKRPs.

    ``W`` is the 0/1 observation mask.  Because the object factor is the
    entity factor again, its MTTKRP is added onto the subject one.
    """
    family = get_family(family)
    A = model.A.astype(np.float64)
    B = model.B.astype(np.float64)
    M = cp_full(A, B, A)
    Y = W * family.deriv(X, M)
    GA = unfold(Y, 0) @ khatri_rao(B, A) + unfold(Y, 2) @ khatri_rao(A, B)
    GB = unfold(Y, 1) @ khatri_rao(A, A)
    return GA, GB


def dense_cp_als_residual_gradient(model: FactorModel, X: np.ndarray, W: np.ndarray):
    """Classical least-squares CP gradient ``2 (M - X)`` contracted per mode."""
    A = model.A.astype(np.float64)
    B = model.B.astype(np.float64)
    Rres = 2.0 * W * (cp_full(A, B, A) - X)
    GA = unfold(Rres, 0) @ khatri_rao(B, A) + unfold(Rres, 2) @ khatri_rao(A, B)
    GB = unfold(Rres, 1) @ khatri_rao(A, A)
    return GA, GB


def finite_difference_gradient(model: FactorModel, omega: Batch, family="bernoulli", h=1e-5):
    """Central differences of the total loss w.r.t. every factor entry."""
    work = FactorModel(model.A.astype(np.float64), model.B.astype(np.float64))
    grads = []
    for M in (work.A, work.B):
        G = np.zeros_like(M)
        for idx in np.ndindex(M.shape):
            old = M[idx]
            M[idx] = old + h
            fp = full_loss(work, omega, family)
            M[idx] = old - h
            fm = full_loss(work, omega, family)
            M[idx] = old
            G[idx] = (fp - fm) / (2 * h)
        grads.append(G)
    return grads[0], grads[1]


def max_relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - r| / max(|a|, |r|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / denom)) if a.size else 0.0


@dataclass
class Instance:
    model: FactorModel
    omega: Batch
    X: np.ndarray  # dense labels
    W: np.ndarray  # dense 0/1 observation mask


def random_instance(n_e: int, n_r: int, rank: int, density: float, rng=None,
                    family="bernoulli", scale: float = 0.5) -> Instance:
    """Random factors plus a random observed set over an ``n_e x n_r x n_e`` tensor."""
    rng = np.random.default_rng(rng)
    model = FactorModel(rng.normal(0, scale, (n_e, rank)), rng.normal(0, scale, (n_r, rank)))
    W = (rng.random((n_e, n_r, n_e)) < density).astype(np.float64)
    if get_family(family).name == "bernoulli":
        X = (rng.random(W.shape) < 0.5).astype(np.float64)
    else:
        X = rng.normal(size=W.shape)
    X *= W
    s, r, o = np.nonzero(W)
    omega = Batch(s, r, o, X[s, r, o])
    return Instance(model, omega, X, W)


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_observed: int
    dense_rel_error: float | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        ok = self.max_rel_error < tol
        if self.dense_rel_error is not None:
            ok = ok and self.dense_rel_error < tol
        return ok


def gradcheck(dims=(20, 5, 20), rank=8, density=0.1, seed=0, family="bernoulli",
              h=1e-5, batch_size=None) -> GradcheckResult:
    """Compare batched analytic gradients with finite differences.

    For the Gaussian family the dense least-squares CP gradient is checked too.
    """
    n_e, n_r, n_e2 = dims
    if n_e != n_e2:
        raise ValueError("subject and object modes share the entity axis; dims[0] must equal dims[2]")
    inst = random_instance(n_e, n_r, rank, density, rng=seed, family=family)
    GA, GB, _ = model_gradient(inst.model, inst.omega, family, batch_size=batch_size)
    FA, FB = finite_difference_gradient(inst.model, inst.omega, family, h=h)
    err = max(max_relative_error(GA, FA), max_relative_error(GB, FB))
    dense_err = None
    if get_family(family).name == "gaussian":
        DA, DB = dense_cp_als_residual_gradient(inst.model, inst.X, inst.W)
        dense_err = max(max_relative_error(GA, DA), max_relative_error(GB, DB))
    return GradcheckResult(err, len(inst.omega), dense_err)
