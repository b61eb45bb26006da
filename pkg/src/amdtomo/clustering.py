"""Mixture-model segmentation of the subspace volume.

Voxels of the reconstructed subspace stack are points in R^{N_s}; materials
show up as clusters there because every voxel of one material shares the
same coefficient vector up to noise. A Gaussian mixture fitted by EM
segments them, the per-cluster means form the rows of T, and the material
dictionary follows as D^m = D^s T^t with the background row dropped. The
column scale 1/delta converts dictionary entries from per-ray density to
attenuation per length.

EM is fitted on at most `subsample` voxels (assignment always uses all of
them) with k-means++ seeding and full covariances, ridge-stabilized by
eps = ridge * trace/N_s per component. A component whose weight drops
below one sample's worth is re-seeded once; the log-likelihood trace
restarts at that point, so the recorded trace is always non-decreasing.

The empty region is rarely a single Gaussian: undersampling streaks from
the strong absorbers give it heavy structured tails, and a mixture with
exactly one component per material spends its components splitting that
background instead of separating a weak material from it. Fitting more
components than regions and then merging the closest ones back together
(`reduce_mixture`) sidesteps this: the background soaks up the extra
components and the merge reunites them, because their means sit far
closer together than any material sits to the background.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.linalg import solve_triangular
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .tensor_io import HyperTensor, SpectraTable, WavelengthGrid

__all__ = [
    "GmmOptions",
    "GmmModel",
    "Segmentation",
    "fit_gmm",
    "reduce_mixture",
    "segment",
    "material_dictionary",
    "match_materials",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmOptions:
    max_iter: int = 200
    tol: float = 1e-7
    ridge: float = 1e-6
    seed: int = 0
    n_init: int = 4
    subsample: int = 2_000_000

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.ridge <= 0:
            raise ValueError(f"ridge must be > 0, got {self.ridge}")
        if self.n_init < 1:
            raise ValueError(f"n_init must be >= 1, got {self.n_init}")
        if self.subsample < 1:
            raise ValueError(f"subsample must be >= 1, got {self.subsample}")


@dataclass(frozen=True)
class GmmModel:
    """Fitted mixture: `weights` on the simplex, `means` (K, N_s),
    `covariances` (K, N_s, N_s) symmetric positive definite."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        c = np.asarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or c.ndim != 3:
            raise ValueError("weights/means/covariances must be 1-D/2-D/3-D")
        k, s = m.shape
        if w.shape != (k,) or c.shape != (k, s, s):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {m.shape}, "
                f"covariances {c.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        if not np.allclose(c, np.swapaxes(c, 1, 2), rtol=0, atol=1e-8):
            raise ValueError("covariances must be symmetric")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.ascontiguousarray(m))
        object.__setattr__(self, "covariances", np.ascontiguousarray(c))
        object.__setattr__(
            self,
            "log_likelihood_trace",
            np.asarray(self.log_likelihood_trace, dtype=np.float64),
        )

    @property
    def n_clusters(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class Segmentation:
    """Voxel labels plus the per-cluster mean matrix T.

    Row k of `cluster_means` is the mean subspace vector over voxels
    labeled k; a cluster that received no voxels has a NaN row and a
    False entry in `valid_rows`.
    """

    labels: HyperTensor
    cluster_means: np.ndarray
    background_cluster_id: int
    valid_rows: np.ndarray


def _log_gauss(X, mean, cov):
    # log N(x; mean, cov) via Cholesky; cov is ridge-stabilized upstream
    L = np.linalg.cholesky(cov)
    dev = solve_triangular(L, (X - mean).T, lower=True)
    maha = np.einsum("ij,ij->j", dev, dev)
    return -0.5 * (X.shape[1] * _LOG_2PI + maha) - np.log(np.diag(L)).sum()


def _e_step(X, weights, means, covs):
    """Per-sample responsibilities and mean log-likelihood."""
    k = weights.size
    logr = np.empty((X.shape[0], k))
    for j in range(k):
        logr[:, j] = np.log(weights[j]) + _log_gauss(X, means[j], covs[j])
    norm = logsumexp(logr, axis=1)
    return np.exp(logr - norm[:, None]), float(norm.mean())


def _ridge_eps(cov, ridge):
    tr = float(np.trace(cov))
    return ridge * (tr / cov.shape[0] if tr > 0 else 1.0)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        tot = d2.sum()
        if tot > 0:
            idx = rng.choice(n, p=d2 / tot)
        else:
            idx = rng.integers(n)
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _fit_single(X, k, rng, opts):
    n, s = X.shape
    global_cov = np.cov(X.T, bias=True).reshape(s, s)
    base_cov = global_cov + _ridge_eps(global_cov, opts.ridge) * np.eye(s)
    means = _kmeanspp(X, k, rng)
    covs = np.repeat(base_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    reseeded = np.zeros(k, dtype=bool)
    trace = []
    while True:
        R, ll = _e_step(X, weights, means, covs)
        nk = R.sum(axis=0)
        starved = nk < 1.0
        if starved.any():
            dead = np.flatnonzero(starved)
            if reseeded[dead].any():
                raise ValueError(
                    f"cluster {int(dead[0])} degenerate after re-seeding; "
                    "reduce n_clusters or the ridge"
                )
            for j in dead:
                means[j] = X[rng.integers(n)]
                covs[j] = base_cov
                weights[j] = 1.0 / k
                reseeded[j] = True
            weights /= weights.sum()
            trace = []  # the re-seed invalidates comparisons across it
            continue
        trace.append(ll)
        weights = nk / n
        means = (R.T @ X) / nk[:, None]
        for j in range(k):
            dev = X - means[j]
            cov = (dev.T * R[:, j]) @ dev / nk[j]
            covs[j] = cov + _ridge_eps(cov, opts.ridge) * np.eye(s)
        if len(trace) >= 2 and (trace[-1] - trace[-2]) <= opts.tol * abs(trace[-2]):
            break
        if len(trace) >= opts.max_iter:
            break
    return weights, means, covs, np.asarray(trace)


def fit_gmm(
    x_s: HyperTensor, n_clusters: int, opts: GmmOptions | None = None
) -> GmmModel:
    """Fit a full-covariance Gaussian mixture to the voxel vectors.

    Runs `n_init` independently seeded EM fits and keeps the one with the
    highest final log-likelihood. Fitting subsamples down to
    `opts.subsample` voxels; labels are assigned later on all of them.
    """
    x_s.require("slice", "row", "col", "subspace")
    opts = opts or GmmOptions()
    X = x_s.data.reshape(-1, x_s.dims[-1])
    if not 1 <= n_clusters <= X.shape[0]:
        raise ValueError(
            f"n_clusters must be in [1, {X.shape[0]}], got {n_clusters}"
        )
    best = None
    for i in range(opts.n_init):
        rng = np.random.default_rng(np.random.SeedSequence((opts.seed, i)))
        Xf = X
        if X.shape[0] > opts.subsample:
            Xf = X[rng.choice(X.shape[0], opts.subsample, replace=False)]
        w, m, c, tr = _fit_single(Xf, n_clusters, rng, opts)
        if best is None or tr[-1] > best[3][-1]:
            best = (w, m, c, tr)
    return GmmModel(*best)


def _pooled_separation(m1, c1, m2, c2):
    # squared Mahalanobis distance of the means under the pooled covariance
    d = m1 - m2
    return float(d @ np.linalg.solve(0.5 * (c1 + c2), d))


def reduce_mixture(
    model: GmmModel, n_clusters: int
) -> tuple[GmmModel, tuple[tuple[int, ...], ...]]:
    """Merge mixture components pairwise down to `n_clusters`.

    The pair whose means are closest under the pooled covariance merges
    first and is replaced by its moment-matched Gaussian, repeating until
    `n_clusters` components remain. Mean separation is deliberately not
    weighted by component mass: likelihood-loss criteria favor absorbing
    small components, and the small components are exactly the material
    regions worth keeping. Returns the reduced model together with the
    groups of original component ids behind each reduced component; the
    mixture's total mean and scatter are preserved.
    """
    k = model.n_clusters
    if not 1 <= n_clusters <= k:
        raise ValueError(
            f"n_clusters must be in [1, {k}], got {n_clusters}"
        )
    groups = [[j] for j in range(k)]
    W = list(model.weights)
    M = [m.copy() for m in model.means]
    C = [c.copy() for c in model.covariances]
    while len(groups) > n_clusters:
        best = None
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                d2 = _pooled_separation(M[i], C[i], M[j], C[j])
                if best is None or d2 < best[0]:
                    best = (d2, i, j)
        _, i, j = best
        w = W[i] + W[j]
        mu = (W[i] * M[i] + W[j] * M[j]) / w
        di, dj = M[i] - mu, M[j] - mu
        C[i] = (
            W[i] * (C[i] + np.outer(di, di))
            + W[j] * (C[j] + np.outer(dj, dj))
        ) / w
        W[i], M[i] = w, mu
        groups[i] = sorted(groups[i] + groups[j])
        del groups[j], W[j], M[j], C[j]
    reduced = GmmModel(
        np.asarray(W), np.asarray(M), np.asarray(C),
        model.log_likelihood_trace,
    )
    return reduced, tuple(tuple(g) for g in groups)


def _check_groups(groups, k):
    flat = [j for g in groups for j in g]
    if sorted(flat) != list(range(k)) or any(len(g) == 0 for g in groups):
        raise ValueError(
            f"groups must partition the {k} mixture components, got {groups}"
        )


def segment(
    x_s: HyperTensor,
    model: GmmModel,
    erode: bool = False,
    groups: tuple[tuple[int, ...], ...] | None = None,
) -> Segmentation:
    """Assign every voxel to its most responsible cluster and compute T.

    Ties go to the lowest cluster id. The background cluster is the one
    whose mean has the smallest Euclidean norm: empty-region voxels sit
    near the subspace origin because their densities are near zero. With
    `erode` the T means exclude a one-voxel boundary layer of each region
    (volume faces kept), trimming partial-volume voxels; a region that
    erosion would empty keeps its full mask. With `groups` (from
    reduce_mixture) a voxel's label is the group with the largest summed
    responsibility, so one region may be covered by several Gaussians.
    """
    x_s.require("slice", "row", "col", "subspace")
    X = x_s.data.reshape(-1, x_s.dims[-1])
    if X.shape[1] != model.means.shape[1]:
        raise ValueError(
            f"model has {model.means.shape[1]} subspace dims, "
            f"volume has {X.shape[1]}"
        )
    R, _ = _e_step(X, model.weights, model.means, model.covariances)
    if groups is None:
        k = model.n_clusters
    else:
        _check_groups(groups, model.n_clusters)
        k = len(groups)
        R = np.stack([R[:, list(g)].sum(axis=1) for g in groups], axis=1)
    labels = np.argmax(R, axis=1)
    vol_dims = x_s.dims[:3]

    mean_src = labels
    if erode:
        lab3 = labels.reshape(vol_dims)
        mean_src = labels.copy()
        for j in range(k):
            mask = lab3 == j
            core = ndimage.binary_erosion(mask, border_value=1)
            if core.any():
                mean_src[(mask & ~core).ravel()] = -1
    keep = mean_src >= 0
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, mean_src[keep], X[keep])
    counts = np.bincount(mean_src[keep], minlength=k).astype(np.float64)
    with np.errstate(invalid="ignore"):
        T = sums / counts[:, None]
    valid = np.bincount(labels, minlength=k) > 0
    T[~valid] = np.nan

    norms = np.where(valid, np.linalg.norm(np.nan_to_num(T), axis=1), np.inf)
    return Segmentation(
        HyperTensor(labels.reshape(vol_dims).astype(np.float64),
                    ("slice", "row", "col")),
        T,
        int(np.argmin(norms)),
        valid,
    )


def material_dictionary(
    D_s: np.ndarray,
    seg: Segmentation,
    delta: float,
    grid: WavelengthGrid,
    names: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, SpectraTable]:
    """Material dictionary D^m = D^s T^t and the attenuation table.

    The background row of T is dropped before the product; the remaining
    rows are the materials. Negative dictionary entries (clustering noise
    leaking across regions) are clamped to zero with a RuntimeWarning
    reporting the clamped mass fraction. `spectra.mu` is D^m transposed
    and divided by `delta`, turning per-ray density into attenuation per
    length. `grid` is the wavelength axis of D_s rows; `names` defaults
    to material_0.. in row order.
    """
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    D_s = np.asarray(D_s, dtype=np.float64)
    if D_s.shape[0] != grid.n_bins:
        raise ValueError(
            f"D_s has {D_s.shape[0]} rows, grid has {grid.n_bins} bins"
        )
    rows = [j for j in range(seg.cluster_means.shape[0])
            if j != seg.background_cluster_id]
    if not all(seg.valid_rows[j] for j in rows):
        raise ValueError("segmentation has an empty material cluster")
    T_m = seg.cluster_means[rows]
    if D_s.shape[1] != T_m.shape[1]:
        raise ValueError(
            f"D_s has {D_s.shape[1]} columns, T has {T_m.shape[1]}"
        )
    D_m = D_s @ T_m.T
    neg = -float(D_m[D_m < 0].sum())
    total = float(np.abs(D_m).sum())
    if neg > 0:
        warnings.warn(
            f"clamped negative dictionary mass fraction "
            f"{neg / max(total, 1e-300):.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
        D_m = np.maximum(D_m, 0.0)
    if names is None:
        names = tuple(f"material_{j}" for j in range(D_m.shape[1]))
    return D_m, SpectraTable(names, grid, D_m.T / delta)


def match_materials(
    spectra: SpectraTable, reference: SpectraTable
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal pairing of estimated and reference materials.

    Returns `(perm, nrmse)` where `perm[j]` is the row of `spectra`
    assigned to reference row j under minimum-total-NRMSE matching and
    `nrmse[j] = |mu_est - mu_ref| / |mu_ref|` for that pair.
    """
    if spectra.grid != reference.grid:
        raise ValueError("spectra are on different wavelength grids")
    est, ref = spectra.mu, reference.mu
    if est.shape[0] != ref.shape[0]:
        raise ValueError(
            f"material count mismatch: {est.shape[0]} vs {ref.shape[0]}"
        )
    refn = np.linalg.norm(ref, axis=1)
    diff = est[:, None, :] - ref[None, :, :]
    cost = np.linalg.norm(diff, axis=2)
    cost = np.where(refn[None, :] > 0, cost / np.maximum(refn, 1e-300),
                    np.where(cost > 0, 1e30, 0.0))
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(ref.shape[0], dtype=np.intp)
    perm[cols] = rows
    return perm, cost[perm, np.arange(ref.shape[0])]
