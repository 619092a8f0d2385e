"""Distribution metrics over oracle features, plus the adherence score.

The Frechet distance assumes Gaussian moments; its matrix square root uses
a symmetric eigendecomposition with eigenvalues below 1e-10 clamped to
zero, which keeps small-sample covariance noise from turning the trace
negative.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .world import adherence_score

KL_EPS = 1e-9
EIG_CLAMP = 1e-10


@dataclass
class FeatureCloud:
    features: np.ndarray  # (N, F)
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise InputError("feature cloud needs at least two rows")
        if not np.all(np.isfinite(self.features)):
            raise InputError("non-finite feature values")

    def moments(self):
        mu = self.features.mean(axis=0)
        cov = np.cov(self.features, rowvar=False, bias=False)
        return mu, np.atleast_2d(cov)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.where(vals < EIG_CLAMP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})."""
    mu_a, cov_a = a.moments()
    mu_b, cov_b = b.moments()
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise InputError("non-finite covariance")
    n_feat = cov_a.shape[0]
    for cloud in (a, b):
        if cloud.features.shape[0] < n_feat + 1:
            warnings.warn(
                f"feature cloud {cloud.source!r} has fewer rows than "
                "dimensions + 1; covariance is rank-deficient",
                stacklevel=2,
            )
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return mean_term + trace_term


def _smooth(p):
    p = np.asarray(p, dtype=np.float64) + KL_EPS
    return p / p.sum()


def kl_divergence(p, q):
    p = _smooth(p)
    q = _smooth(q)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def kl_metric(p_list, q_list):
    """Mean KL(p_i || q_i) over matched item pairs."""
    if len(p_list) != len(q_list):
        raise InputError("matched distribution lists differ in length")
    if not p_list:
        raise InputError("empty distribution lists")
    return float(np.mean([kl_divergence(p, q) for p, q in zip(p_list, q_list)]))


def inception_score(probs):
    """exp(mean_i KL(p_i || mean_j p_j)) for rows of classifier outputs."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise InputError("expected an (N, C) matrix of distributions")
    marginal = probs.mean(axis=0)
    kls = []
    for row in probs:
        live = row > 0
        kls.append(np.sum(row[live] * (np.log(row[live]) - np.log(marginal[live]))))
    return float(np.exp(np.mean(kls)))


def adherence(frames, caption_or_keywords):
    """Oracle adherence in [0, 1]; see :func:`soundlm.world.adherence_score`."""
    return adherence_score(frames, caption_or_keywords)
