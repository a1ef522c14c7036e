"""Variational upper bound on the mutual information between the
reconstructed envelope and a frozen subject embedding.

A pair of two-layer perceptrons maps a pooled envelope summary z_e to the
mean and diagonal log-variance of a Gaussian q(z_s | z_e).  Fitting q by
maximum likelihood on matched pairs tightens a contrastive log-ratio
bound: matched log-likelihood minus the all-pairs average.  The bound
feeds the reconstructor's objective as a clipped penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .network import Network, he_dense, xavier_dense

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MiConfig:
    envelope_dim: int
    embedding_dim: int
    hidden: int = 128
    logvar_clip: float = 10.0

    def __post_init__(self):
        if min(self.envelope_dim, self.embedding_dim, self.hidden) < 1:
            raise ParameterError("MiConfig: all widths must be positive")
        if self.logvar_clip <= 0:
            raise ParameterError(f"MiConfig: clip must be positive, got {self.logvar_clip}")


def envelope_summary(recon: Tensor, dim: int = 64) -> Tensor:
    """Parameter-free summary of (B, L) envelopes: mean-pool to (B, dim)."""
    if recon.ndim != 2:
        raise DimensionError(f"envelope_summary: need (B, L), got {recon.shape}")
    L = recon.shape[1]
    if dim < 1 or L % dim:
        raise DimensionError(f"envelope_summary: length {L} does not split into {dim} bins")
    return ad.avgpool_last(recon, L // dim)


class MiEstimator(Network):
    """q(z_s | z_e) with diagonal-Gaussian output and clamped log-variance."""

    def __init__(self, cfg: MiConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        for head in ("mean", "logvar"):
            self._register(f"mi.{head}.0.weight", he_dense(rng, cfg.hidden, cfg.envelope_dim))
            self._register(f"mi.{head}.0.bias", np.zeros(cfg.hidden))
            self._register(f"mi.{head}.1.weight", xavier_dense(rng, cfg.embedding_dim, cfg.hidden))
            self._register(f"mi.{head}.1.bias", np.zeros(cfg.embedding_dim))

    def _check(self, z_e: Tensor, z_s: Tensor) -> None:
        if z_e.ndim != 2 or z_e.shape[1] != self.cfg.envelope_dim:
            raise DimensionError(
                f"estimator: z_e must be (B, {self.cfg.envelope_dim}), got {z_e.shape}")
        if z_s.ndim != 2 or z_s.shape[1] != self.cfg.embedding_dim:
            raise DimensionError(
                f"estimator: z_s must be (B, {self.cfg.embedding_dim}), got {z_s.shape}")
        if z_e.shape[0] != z_s.shape[0]:
            raise DimensionError(
                f"estimator: batch sizes {z_e.shape[0]} and {z_s.shape[0]} differ")

    def heads(self, z_e: Tensor) -> tuple[Tensor, Tensor]:
        """Conditional mean and log-variance; the latter clamped for stability."""
        p = self._params
        h = ad.relu(ad.dense_affine(z_e, p["mi.mean.0.weight"], p["mi.mean.0.bias"]))
        mu = ad.dense_affine(h, p["mi.mean.1.weight"], p["mi.mean.1.bias"])
        g = ad.relu(ad.dense_affine(z_e, p["mi.logvar.0.weight"], p["mi.logvar.0.bias"]))
        raw = ad.dense_affine(g, p["mi.logvar.1.weight"], p["mi.logvar.1.bias"])
        return mu, ad.clamp(raw, -self.cfg.logvar_clip, self.cfg.logvar_clip)

    @staticmethod
    def _matched(mu: Tensor, logvar: Tensor, z_s: Tensor) -> Tensor:
        D = z_s.shape[1]
        diff = ad.sub(z_s, mu)
        quad = ad.sum_last(ad.mul(ad.square(diff), ad.exp(ad.neg(logvar))))
        norm = ad.add_scalar(ad.sum_last(logvar), D * _LOG_2PI)
        return ad.mul_scalar(ad.add(quad, norm), -0.5)

    def loglik(self, z_e: Tensor, z_s: Tensor) -> Tensor:
        """log q(z_s_i | z_e_i) per matched pair: (B,)."""
        self._check(z_e, z_s)
        mu, logvar = self.heads(z_e)
        return self._matched(mu, logvar, z_s)

    def fit_loss(self, z_e: Tensor, z_s: Tensor) -> Tensor:
        """Negative mean matched log-likelihood; minimizing tightens the bound."""
        return ad.neg(ad.mean_all(self.loglik(z_e, z_s)))

    def mi_bound(self, z_e: Tensor, z_s: Tensor) -> Tensor:
        """Matched mean log q minus the all-pairs mean: the contrastive bound."""
        self._check(z_e, z_s)
        if z_e.shape[0] < 2:
            raise DimensionError("mi_bound: need at least two pairs for the marginal term")
        mu, logvar = self.heads(z_e)
        pair = ad.pairwise_diag_gaussian_loglik(mu, logvar, z_s)
        return ad.sub(ad.mean_all(self._matched(mu, logvar, z_s)), ad.mean_all(pair))

    def estimate(self, z_e: np.ndarray, z_s: np.ndarray, *, chunk: int = 1024) -> float:
        """Graph-free bound evaluation, chunked so n x n never materializes
        with the feature axis attached.  Matches mi_bound on small batches."""
        z_e = np.asarray(z_e, dtype=np.float64)
        z_s = np.asarray(z_s, dtype=np.float64)
        self._check(Tensor(z_e), Tensor(z_s))
        n, D = z_s.shape
        if n < 2:
            raise DimensionError("estimate: need at least two pairs for the marginal term")
        P = {k: t.data for k, t in self._params.items()}
        h = np.maximum(z_e @ P["mi.mean.0.weight"].T + P["mi.mean.0.bias"], 0.0)
        mu = h @ P["mi.mean.1.weight"].T + P["mi.mean.1.bias"]
        g = np.maximum(z_e @ P["mi.logvar.0.weight"].T + P["mi.logvar.0.bias"], 0.0)
        lv = np.clip(g @ P["mi.logvar.1.weight"].T + P["mi.logvar.1.bias"],
                     -self.cfg.logvar_clip, self.cfg.logvar_clip)
        inv = np.exp(-lv)
        lvsum = lv.sum(-1)
        matched = -0.5 * (((z_s - mu) ** 2 * inv).sum(-1) + lvsum + D * _LOG_2PI)
        z2 = z_s * z_s
        total = 0.0
        for lo in range(0, n, max(chunk, 1)):
            hi = min(lo + max(chunk, 1), n)
            quad = (inv[lo:hi] @ z2.T
                    - 2.0 * (mu[lo:hi] * inv[lo:hi]) @ z_s.T
                    + (mu[lo:hi] * mu[lo:hi] * inv[lo:hi]).sum(-1)[:, None])
            total += (-0.5 * (quad + lvsum[lo:hi, None] + D * _LOG_2PI)).sum()
        return float(matched.mean() - total / (n * n))


def total_loss(l_corr: Tensor, l_var_hat: Tensor, lam: float) -> Tensor:
    """Reconstructor objective: l_corr + lam * max(0, l_var_hat).

    The clip keeps a negative bound estimate from rewarding the codec;
    when it is active the penalty contributes neither value nor gradient.
    """
    lam = float(lam)
    if lam < 0:
        raise ParameterError(f"total_loss: lambda must be nonnegative, got {lam}")
    return ad.add(l_corr, ad.mul_scalar(ad.clamp_min(l_var_hat, 0.0), lam))
