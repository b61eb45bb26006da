"""Non-negative factorization of the flattened density matrix.

The density stack becomes a matrix with one hyperspectral projection per
row. Free-dictionary factorization P ~ V D^T runs Lee-Seung multiplicative
updates, whose objective is non-increasing by construction and therefore
directly testable. Fixed-dictionary coefficient fitting solves each row as
an exact non-negative least-squares problem with an active-set method on
the normal equations; rows are independent, so the batch work is one
matrix product.

The Frobenius objective is evaluated through the expansion
``|P|^2 - 2<P^T V, D> + <V^T V, D^T D>`` so the dense product V D^T is
never materialized; at full problem size that product would dwarf every
other allocation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preprocessing import DensityStack
from .tensor_io import HyperTensor

__all__ = [
    "NmfOptions",
    "Factorization",
    "flatten_densities",
    "unflatten_densities",
    "nmf",
    "nmf_fixed_dictionary",
    "choose_subspace_dim",
]

_EPS = 1e-12


@dataclass(frozen=True)
class NmfOptions:
    max_iter: int = 500
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class Factorization:
    """Factor pair with its optimization history.

    `objective_trace` holds the squared Frobenius loss after each
    iteration; `clamped_fraction` is the share of absolute input mass that
    was negative and got clamped before factorization.
    """

    V: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    objective_trace: np.ndarray = field(repr=False)
    converged: bool = False
    clamped_fraction: float = 0.0

    @property
    def n_components(self) -> int:
        return self.D.shape[1]


def flatten_densities(stack: DensityStack) -> np.ndarray:
    """View of the densities as (N_views*N_rows*N_cols, N_bins)."""
    n_k = stack.p.dims[-1]
    return stack.p.data.reshape(-1, n_k)


def unflatten_densities(P: np.ndarray, like: DensityStack) -> DensityStack:
    """Inverse of :func:`flatten_densities` against a template stack."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    if P.shape != (np.prod(like.p.dims[:3]), like.p.dims[3]):
        raise ValueError(
            f"matrix shape {P.shape} does not match stack dims {like.p.dims}"
        )
    p = HyperTensor(P.reshape(like.p.dims), like.p.axis_labels)
    return DensityStack(p, like.offsets, like.background_mask)


def nmf(
    P: np.ndarray, n_components: int, opts: NmfOptions | None = None
) -> Factorization:
    """Multiplicative-update factorization P ~ V D^T with V, D >= 0.

    Negative entries (offset correction can produce them) are clamped to
    zero first and their mass fraction recorded. Stops when the relative
    objective decrease over a 10-iteration window falls below tol, or at
    max_iter. Columns of D come back normalized to unit max with the scale
    folded into V.
    """
    opts = opts or NmfOptions()
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"P must be 2-D, got shape {P.shape}")
    n_p, n_k = P.shape
    # n_components above min(P.shape) adds no expressive power; reject it.
    # Equality is allowed: an exact factorization can still be the goal.
    if not 1 <= n_components <= min(n_p, n_k):
        raise ValueError(
            f"n_components must be in 1..min(P.shape)={min(n_p, n_k)}, "
            f"got {n_components}"
        )
    total = float(np.abs(P).sum())
    if total == 0.0:
        raise ValueError("P is all zero; nothing to factorize")
    Pc = np.maximum(P, 0.0)
    clamped = float(-P[P < 0].sum() / total) if (P < 0).any() else 0.0
    if Pc.max() == 0.0:
        raise ValueError("P is all zero after clamping negatives")

    rng = np.random.default_rng(opts.seed)
    r = int(n_components)
    V = rng.random((n_p, r)) + 0.1
    D = rng.random((n_k, r)) + 0.1
    # scale init so mean(V D^T) matches mean(P)
    c = Pc.mean() * n_p * n_k / float(V.sum(axis=0) @ D.sum(axis=0))
    V *= np.sqrt(c)
    D *= np.sqrt(c)

    p_sq = float(np.vdot(Pc, Pc))
    trace: list[float] = []
    converged = False
    for it in range(opts.max_iter):
        V *= (Pc @ D) / np.maximum(V @ (D.T @ D), _EPS)
        PtV = Pc.T @ V
        VtV = V.T @ V
        D *= PtV / np.maximum(D @ VtV, _EPS)
        obj = p_sq - 2.0 * float(np.vdot(PtV, D)) + float(
            np.vdot(VtV, D.T @ D)
        )
        trace.append(obj)
        if it >= 10:
            prev = trace[-11]
            if prev <= 0 or (prev - obj) / abs(prev) < opts.tol:
                converged = True
                break

    m = D.max(axis=0)
    nz = m > 0
    D[:, nz] /= m[nz]
    V[:, nz] *= m[nz]
    return Factorization(V, D, np.asarray(trace), converged, clamped)


def _nnls_normal(
    G: np.ndarray, h: np.ndarray, trace: list | None = None
) -> np.ndarray:
    """Lawson-Hanson active set for min_{v>=0} 0.5 v^T G v - h^T v.

    G = D^T D and h = D^T p of a least-squares row; terminates in finitely
    many steps since each passive set repeats never with strict objective
    decrease. A safety cap guards float-degenerate cycling.
    """
    n = h.size
    v = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    gscale = float(np.abs(h).max()) or 1.0
    for _ in range(30 * n + 30):
        g = G @ v - h
        cand = ~passive & (g < -1e-12 * gscale)
        if not cand.any():
            break
        passive[int(np.argmin(np.where(cand, g, np.inf)))] = True
        while True:
            idx = np.flatnonzero(passive)
            sub = G[np.ix_(idx, idx)]
            try:
                z = np.linalg.solve(sub, h[idx])
            except np.linalg.LinAlgError:
                z = np.linalg.lstsq(sub, h[idx], rcond=None)[0]
            if (z > 0).all():
                v[:] = 0.0
                v[idx] = z
                break
            vi = v[idx]
            neg = z <= 0
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = vi[neg] / (vi[neg] - z[neg])
            alpha = float(np.min(np.where(np.isfinite(steps), steps, 0.0)))
            vnew = vi + alpha * (z - vi)
            vnew[neg & (vnew <= 1e-14 * max(vi.max(), 1.0))] = 0.0
            v[idx] = np.maximum(vnew, 0.0)
            passive[idx] = v[idx] > 0
            if not passive.any():
                break
        if trace is not None:
            trace.append(0.5 * float(v @ G @ v) - float(h @ v))
    return v


def nmf_fixed_dictionary(
    P: np.ndarray, D: np.ndarray, kkt_tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row NNLS coefficients against a fixed dictionary.

    Returns (V, residuals): V row i minimizes ``|p_i - D v|`` over v >= 0
    and residuals[i] is that minimum norm. Most rows resolve via one batch
    unconstrained solve; only rows whose solution goes negative fall back
    to the active-set iteration.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    D = np.ascontiguousarray(D, dtype=np.float64)
    if P.ndim != 2 or D.ndim != 2 or P.shape[1] != D.shape[0]:
        raise ValueError(
            f"incompatible shapes P {P.shape}, D {D.shape}"
        )
    if (D < 0).any():
        raise ValueError("dictionary must be non-negative")
    col_mass = np.abs(D).sum(axis=0)
    if (col_mass == 0).any():
        raise ValueError(
            f"dictionary columns {np.flatnonzero(col_mass == 0).tolist()} "
            "are all zero"
        )
    G = D.T @ D
    H = P @ D
    try:
        V = np.linalg.solve(G, H.T).T
    except np.linalg.LinAlgError:
        V = np.linalg.lstsq(G, H.T, rcond=None)[0].T
    scale = 1.0 + np.abs(V).max(axis=1, initial=0.0)
    bad = (V < -kkt_tol * scale[:, None]).any(axis=1)
    V = np.maximum(V, 0.0)
    for i in np.flatnonzero(bad):
        V[i] = _nnls_normal(G, H[i])
    row_sq = np.einsum("ij,ij->i", P, P)
    fit_sq = row_sq - 2.0 * np.einsum("ij,ij->i", H, V) + np.einsum(
        "ij,ij->i", V @ G, V
    )
    return V, np.sqrt(np.maximum(fit_sq, 0.0))


def choose_subspace_dim(n_materials: int) -> int:
    """Default subspace size: three components per expected material."""
    if n_materials < 1:
        raise ValueError(f"n_materials must be >= 1, got {n_materials}")
    return 3 * int(n_materials)
