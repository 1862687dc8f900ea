"""Gaussian mixture over joint (z, F) samples, fitted by EM, with Gaussian mixture regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

log = logging.getLogger(__name__)

COLLAPSE_WEIGHT = 1e-6
LOG_2PI = np.log(2 * np.pi)


@dataclass
class GmmConfig:
    tol: float = 1e-7
    max_iter: int = 500
    reg_scale: float = 1e-6  # eps = reg_scale * trace(cov(data)) / dim, floor on covariance eigenvalues
    seed: int = 0


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)
    in_dims: int = 2  # leading block is the conditioning variable
    joint: str = ""
    ll_trace: list = field(default_factory=list)  # mean log-likelihood per EM iteration
    reseeds: int = 0
    converged: bool = False
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float).reshape(len(self.weights), self.dim, self.dim)
        if abs(self.weights.sum() - 1.0) > 1e-12 * max(1, len(self.weights)):
            raise ValueError("mixture weights must sum to 1")

    @property
    def K(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "in_dims": self.in_dims,
            "joint": self.joint,
            "ll_trace": [float(x) for x in self.ll_trace],
            "reseeds": self.reseeds,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]), d.get("in_dims", 2),
                   d.get("joint", ""), list(d.get("ll_trace", [])), d.get("reseeds", 0), d.get("converged", False))


def _log_gauss(X, means, covs):
    """log N(x | mu_k, Sigma_k) for every sample and component: (N, K)."""
    N, D = X.shape
    out = np.empty((N, len(means)))
    for k, (mu, S) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(S)
        diff = np.linalg.solve(L, (X - mu).T)
        out[:, k] = -0.5 * (np.sum(diff**2, axis=0) + D * LOG_2PI) - np.sum(np.log(np.diag(L)))
    return out


def component_logpdf(gmm: GmmModel, X) -> np.ndarray:
    return _log_gauss(np.atleast_2d(np.asarray(X, dtype=float)), gmm.means, gmm.covs) + np.log(gmm.weights)


def log_density(gmm: GmmModel, X) -> np.ndarray:
    return logsumexp(component_logpdf(gmm, X), axis=1)


def gmm_loglik(gmm: GmmModel, X):
    """Per-sample log density summarised as (mean, std, per_sample)."""
    ll = log_density(gmm, X)
    return float(ll.mean()), float(ll.std()), ll


def _init_kmeans(X, K, seed, eps_eye):
    km = KMeans(n_clusters=K, init="k-means++", n_init=1, random_state=seed).fit(X)
    data_cov = np.cov(X, rowvar=False)
    weights = np.bincount(km.labels_, minlength=K) / len(X)
    covs = np.empty((K, X.shape[1], X.shape[1]))
    for k in range(K):
        members = X[km.labels_ == k]
        covs[k] = (np.cov(members, rowvar=False) if len(members) > X.shape[1] else data_cov) + eps_eye
    return weights, km.cluster_centers_.copy(), covs


def fit_gmm(X, K: int = 10, config: GmmConfig | None = None, joint: str = "", in_dims: int = 2) -> GmmModel:
    """EM with k-means++ start.

    Covariance eigenvalues are floored at eps, the exact M-step for the
    constraint Sigma_k >= eps I, so the log-likelihood in ``ll_trace`` cannot
    decrease between re-seeds and every component sees the same variance
    along directions the data does not span. A collapsed component takes the N/K samples nearest (in
    standardised units) to the worst-explained one, sharing them half and half
    with their owners when taking them outright would empty a live component.
    """
    config = config or GmmConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 10 * K:
        raise ValueError(f"need at least {10 * K} samples for K={K}, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples must be finite")
    N, D = X.shape
    data_cov = np.atleast_2d(np.cov(X, rowvar=False))
    eps_eye = config.reg_scale * np.trace(data_cov) / D * np.eye(D)
    weights, means, covs = _init_kmeans(X, K, config.seed, eps_eye)
    scale = np.sqrt(np.diag(data_cov))
    scale = np.where(scale > 0, scale, 1.0)
    n_seed = max(D + 1, N // K)

    trace = []
    reseeds = 0
    converged = False
    for it in range(config.max_iter):
        with np.errstate(divide="ignore"):  # an empty k-means cluster starts at weight 0
            logp = _log_gauss(X, means, covs) + np.log(weights)
        lse = logsumexp(logp, axis=1)
        trace.append(float(lse.mean()))
        if it > 0 and abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
        resp = np.exp(logp - lse[:, None])
        Nk = resp.sum(axis=0)
        taken = np.zeros(N, dtype=bool)
        for k in np.flatnonzero(Nk / N < COLLAPSE_WEIGHT):
            worst = int(np.argmin(np.where(taken, np.inf, lse)))
            log.warning("GMM component %d collapsed at iteration %d; re-seeded at sample %d", k, it, worst)
            # hand the component the worst-explained sample's neighbourhood
            d = np.where(taken, np.inf, np.sum(((X - X[worst]) / scale) ** 2, axis=1))
            near = np.argsort(d, kind="stable")[:n_seed]
            taken[near] = True
            resp[:, k] = 0.0
            left = resp.sum(axis=0) - resp[near].sum(axis=0)
            left[k] = np.inf
            if np.all(left / N >= COLLAPSE_WEIGHT):
                resp[near] = 0.0
                resp[near, k] = 1.0
            else:
                # a hard take would empty a live component, so share the samples instead
                resp[near] *= 0.5 / resp[near].sum(axis=1, keepdims=True)
                resp[near, k] = 0.5
            reseeds += 1
        Nk = resp.sum(axis=0)
        weights = Nk / N
        means = (resp.T @ X) / Nk[:, None]
        for k in range(K):
            diff = X - means[k]
            w, V = np.linalg.eigh((resp[:, k, None] * diff).T @ diff / Nk[k])
            S = (V * np.maximum(w, eps_eye[0, 0])) @ V.T
            covs[k] = 0.5 * (S + S.T)
    return GmmModel(weights / weights.sum(), means, covs, in_dims, joint, trace, reseeds, converged)


def _blocks(gmm: GmmModel):
    i = gmm.in_dims
    return (gmm.means[:, :i], gmm.means[:, i:], gmm.covs[:, :i, :i], gmm.covs[:, i:, :i], gmm.covs[:, i:, i:])


def _conditioning(gmm: GmmModel, Szz):
    """Cholesky-safe input blocks; a singular block is regularised and flagged."""
    out = Szz.copy()
    for k in range(gmm.K):
        try:
            np.linalg.cholesky(out[k])
        except np.linalg.LinAlgError:
            scale = max(np.trace(out[k]) / len(out[k]), 1.0) * 1e-9
            out[k] = out[k] + scale * np.eye(len(out[k]))
            msg = f"component {k}: singular input covariance regularised"
            if msg not in gmm.flags:
                gmm.flags.append(msg)
                log.warning(msg)
    return out


def responsibilities(gmm: GmmModel, z) -> np.ndarray:
    """h_k(z) for each query row: (M, K), rows sum to 1."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    mz, _, Szz, _, _ = _blocks(gmm)
    logp = _log_gauss(z, mz, _conditioning(gmm, Szz)) + np.log(gmm.weights)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def gmr_expect(gmm: GmmModel, z):
    """E[F|z] and Cov[F|z] under the mixture: shapes (M, Dout) and (M, Dout, Dout)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    mz, mF, Szz, SFz, SFF = _blocks(gmm)
    Szz = _conditioning(gmm, Szz)
    h = responsibilities(gmm, z)
    gains = np.stack([np.linalg.solve(Szz[k], SFz[k].T).T for k in range(gmm.K)])  # (K, Dout, Din)
    cond_mean = mF[None] + np.einsum("kij,mkj->mki", gains, z[:, None, :] - mz[None])  # (M, K, Dout)
    cond_cov = SFF - np.einsum("kij,kjl->kil", gains, np.transpose(SFz, (0, 2, 1)))
    E = np.einsum("mk,mki->mi", h, cond_mean)
    second = np.einsum("mk,kij->mij", h, cond_cov) + np.einsum("mk,mki,mkj->mij", h, cond_mean, cond_mean)
    cov = second - np.einsum("mi,mj->mij", E, E)
    return E, 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
