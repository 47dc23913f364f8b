"""Spatio-energy segmentation: per-bin GMM fitting, log-likelihood
reference-bin selection, label-image construction and kernel k-means
clustering with a blended spectral/spatial Gaussian kernel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .recon import MultiEnergyImage

# Full kernel matrices are materialized only up to this many points;
# larger problems are evaluated in row blocks.
KERNEL_MATERIALIZE_CAP = 8192
KERNEL_BLOCK = 2048


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglikelihood: float
    n_iter: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("weights must be non-negative and sum to 1")

    @property
    def n_components(self):
        return self.weights.size


@dataclass
class LabelImage:
    labels: np.ndarray          # (Np,) ints in [0, K)
    K: int
    means: np.ndarray           # (K, B) per-cluster mean spectra
    shape: tuple = ()           # (H, W) when the labels come from a raster
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.K:
            raise ValueError("labels must lie in [0, K)")

    def pixel_values(self) -> np.ndarray:
        """Per-pixel cluster-mean spectra, shape (Np, B)."""
        return self.means[self.labels]


@dataclass(frozen=True)
class KernelParams:
    theta: float = 0.2
    sigma2: float = 0.5
    K: int = 6
    n_init: int = 2
    max_iter: int = 50
    seed: int = 0
    direct_cap: int = 2**16     # run directly up to this many pixels
    subsample: int = 2**14      # uniform subsample size above the cap

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.K < 2:
            raise ValueError("need at least 2 clusters")
        if self.n_init < 1 or self.max_iter < 1:
            raise ValueError("n_init and max_iter must be positive")


def _log_gauss(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def gmm_fit(values: np.ndarray, K: int, seed: int = 0,
            max_iter: int = 200, rel_tol: float = 1e-6) -> GmmModel:
    """1-D Gaussian mixture via EM with quantile-spaced initialization."""
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n <= K:
        raise ValueError("need more data points than components")
    data_var = max(x.var(), 1e-12)
    var_floor = 1e-8 * data_var

    q = (np.arange(K) + 0.5) / K
    means = np.quantile(x, q)
    variances = np.full(K, data_var)
    weights = np.full(K, 1.0 / K)

    ll_prev = -np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        logp = _log_gauss(x[:, None], means[None, :], variances[None, :])
        logp += np.log(np.maximum(weights, 1e-300))[None, :]
        lmax = logp.max(axis=1, keepdims=True)
        lse = lmax[:, 0] + np.log(np.exp(logp - lmax).sum(axis=1))
        ll = float(lse.sum())
        resp = np.exp(logp - lse[:, None])

        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if np.any(empty):
            # Reinitialize empty components at the worst-fit point.
            worst = np.argmin(lse)
            for k in np.flatnonzero(empty):
                means[k] = x[worst]
                variances[k] = data_var
                nk[k] = 1.0
            weights = nk / nk.sum()
            ll_prev = -np.inf
            continue

        weights = nk / n
        means = resp.T @ x / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        variances = np.maximum(variances, var_floor)

        if ll_prev > -np.inf and abs(ll - ll_prev) <= rel_tol * abs(ll_prev):
            ll_prev = ll
            break
        ll_prev = ll
    return GmmModel(weights, means, variances, ll_prev, n_iter)


def gmm_classify(model: GmmModel, values: np.ndarray) -> np.ndarray:
    """Maximum-posterior component index for each value."""
    x = np.asarray(values, dtype=float).ravel()
    logp = _log_gauss(x[:, None], model.means[None, :], model.variances[None, :])
    logp += np.log(np.maximum(model.weights, 1e-300))[None, :]
    return np.argmax(logp, axis=1)


def _minmax_normalize(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def select_reference_bin(y: MultiEnergyImage, K: int, seed: int = 0) -> int:
    """Bin whose min-max-normalized image gets the largest GMM loglikelihood."""
    lls = np.empty(y.n_bins)
    for b in range(y.n_bins):
        model = gmm_fit(_minmax_normalize(y.data[b]), K, seed)
        lls[b] = model.loglikelihood
    return int(np.argmax(lls))


def build_label_image(y: MultiEnergyImage, ref_bin: int, K: int,
                      seed: int = 0) -> LabelImage:
    """GMM-classify the reference bin, then assign each class its per-bin
    mean spectrum (the smoothed label image used by the spatial kernel)."""
    if not 0 <= ref_bin < y.n_bins:
        raise ValueError("reference bin out of range")
    norm = _minmax_normalize(y.data[ref_bin])
    model = gmm_fit(norm, K, seed)
    labels = gmm_classify(model, norm)

    pix = y.pixels()
    kept, dropped = [], []
    for k in range(K):
        if np.any(labels == k):
            kept.append(k)
        else:
            dropped.append(k)
    remap = {old: new for new, old in enumerate(kept)}
    labels = np.array([remap[v] for v in labels])
    means = np.stack([pix[labels == k].mean(axis=0) for k in range(len(kept))])
    meta = {"ref_bin": ref_bin}
    if dropped:
        meta["dropped_classes"] = dropped
    return LabelImage(labels, len(kept), means, (y.height, y.width), meta)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a**2).sum(axis=1)[:, None]
    bb = (b**2).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def combined_kernel(y_a, ys_a, y_b, ys_b, params: KernelParams) -> np.ndarray:
    """Blend of spectral and spatial Gaussian kernels between pixel sets."""
    out = np.zeros((len(y_a), len(y_b)))
    if params.theta < 1.0:
        out += (1.0 - params.theta) * np.exp(
            -_sq_dists(np.atleast_2d(y_a), np.atleast_2d(y_b)) / (2 * params.sigma2)
        )
    if params.theta > 0.0:
        out += params.theta * np.exp(
            -_sq_dists(np.atleast_2d(ys_a), np.atleast_2d(ys_b)) / (2 * params.sigma2)
        )
    return out


def _cluster_stats(y, ys, labels, K, params):
    """Per-cluster mean kernel row (f) and within-cluster mean (g)."""
    n = len(y)
    Z = np.zeros((n, K))
    Z[np.arange(n), labels] = 1.0
    counts = Z.sum(axis=0)
    counts_safe = np.maximum(counts, 1.0)
    if n <= KERNEL_MATERIALIZE_CAP:
        Kmat = combined_kernel(y, ys, y, ys, params)
        f = Kmat @ (Z / counts_safe)
        g = np.einsum("nk,nm,mk->k", Z / counts_safe, Kmat, Z / counts_safe)
    else:
        f = np.zeros((n, K))
        for start in range(0, n, KERNEL_BLOCK):
            sl = slice(start, min(start + KERNEL_BLOCK, n))
            f[sl] = combined_kernel(y[sl], ys[sl], y, ys, params) @ (Z / counts_safe)
        g = np.array([
            f[labels == k, k].sum() / counts_safe[k] if counts[k] else 0.0
            for k in range(K)
        ])
    return f, g, counts


def _kernel_distances(f, g):
    # Diagonal kernel entries are exactly 1 for the blended Gaussian kernel.
    return 1.0 - 2.0 * f + g[None, :]


def _kmeanspp_init(y, ys, K, params, rng):
    n = len(y)
    centers = [int(rng.integers(n))]
    d2 = 2.0 - 2.0 * combined_kernel(
        y[centers[-1]: centers[-1] + 1], ys[centers[-1]: centers[-1] + 1], y, ys, params
    )[0]
    for _ in range(1, K):
        probs = np.maximum(d2, 0.0)
        total = probs.sum()
        if total <= 0:
            centers.append(int(rng.integers(n)))
        else:
            centers.append(int(rng.choice(n, p=probs / total)))
        nd = 2.0 - 2.0 * combined_kernel(
            y[centers[-1]: centers[-1] + 1], ys[centers[-1]: centers[-1] + 1],
            y, ys, params
        )[0]
        d2 = np.minimum(d2, nd)
    cy = y[centers]
    cys = ys[centers]
    return np.argmin(
        2.0 - 2.0 * combined_kernel(y, ys, cy, cys, params), axis=1
    )


def _lloyd(y, ys, labels, params):
    K = params.K
    obj_trace = []
    for _ in range(params.max_iter):
        f, g, counts = _cluster_stats(y, ys, labels, K, params)
        dists = _kernel_distances(f, g)
        obj = float(dists[np.arange(len(y)), labels].sum())
        obj_trace.append(obj)
        new_labels = np.argmin(dists, axis=1)

        # Empty-cluster repair: seed each empty cluster with the point
        # farthest from its current cluster.
        for k in range(K):
            if not np.any(new_labels == k):
                cur = dists[np.arange(len(y)), new_labels]
                far = int(np.argmax(cur))
                new_labels[far] = k
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    f, g, _ = _cluster_stats(y, ys, labels, K, params)
    obj = float(_kernel_distances(f, g)[np.arange(len(y)), labels].sum())
    obj_trace.append(obj)
    return labels, obj, obj_trace


def kernel_kmeans(y: MultiEnergyImage, ys: LabelImage,
                  params: KernelParams) -> LabelImage:
    """ROI partition by kernel k-means over the blended kernel.

    Above `direct_cap` pixels the clustering runs on a uniform subsample
    and the remaining pixels are assigned by the same kernel distance.
    """
    pix = y.pixels()
    ys_pix = ys.pixel_values()
    n = pix.shape[0]
    rng = np.random.default_rng(params.seed)

    if n > params.direct_cap:
        sample = np.sort(rng.choice(n, size=params.subsample, replace=False))
    else:
        sample = np.arange(n)
    sy, sys_ = pix[sample], ys_pix[sample]

    best = None
    for _ in range(params.n_init):
        init = _kmeanspp_init(sy, sys_, params.K, params, rng)
        labels_s, obj, trace = _lloyd(sy, sys_, init, params)
        if best is None or obj < best[1] - 1e-12:
            best = (labels_s, obj, trace)
    labels_s, obj, trace = best

    labels = np.empty(n, dtype=int)
    labels[sample] = labels_s
    rest = np.setdiff1d(np.arange(n), sample, assume_unique=True)
    if rest.size:
        f_s, g, _ = _cluster_stats(sy, sys_, labels_s, params.K, params)
        Z = np.zeros((len(sample), params.K))
        Z[np.arange(len(sample)), labels_s] = 1.0
        counts = np.maximum(Z.sum(axis=0), 1.0)
        for start in range(0, rest.size, KERNEL_BLOCK):
            sl = rest[start: start + KERNEL_BLOCK]
            kb = combined_kernel(pix[sl], ys_pix[sl], sy, sys_, params)
            dists = 1.0 - 2.0 * (kb @ (Z / counts)) + g[None, :]
            labels[sl] = np.argmin(dists, axis=1)

    means = np.stack([
        pix[labels == k].mean(axis=0) if np.any(labels == k) else np.zeros(pix.shape[1])
        for k in range(params.K)
    ])
    meta = {
        "objective": obj,
        "objective_trace": trace,
        "theta": params.theta,
        "sigma2": params.sigma2,
        "seed": params.seed,
        "subsampled": bool(n > params.direct_cap),
        "converged": len(trace) - 1 < params.max_iter,
    }
    return LabelImage(labels, params.K, means, (y.height, y.width), meta)
