"""Subject classifier over EEG windows, doubling as an embedding extractor.

Three dilated multi-scale residual blocks with per-channel gating feed a
fusion convolution; attentive statistics pooling turns the fused frames
into one vector per window.  The pooled vector is the subject embedding
consumed downstream, so it is exposed independently of the softmax head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .network import Network, he_conv, he_dense, xavier_dense


@dataclass(frozen=True)
class ClassifierConfig:
    n_subjects: int
    channels: int = 64
    scale: int = 4
    se_reduction: int = 8
    dilations: tuple[int, int, int] = (1, 2, 3)
    kernel_size: int = 3
    fused_channels: int = 128
    attn_dim: int = 64
    attn_nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ParameterError(f"ClassifierConfig: need at least 2 classes, got {self.n_subjects}")
        if self.channels < 2 or self.scale < 2:
            raise ParameterError("ClassifierConfig: channels and scale must be at least 2")
        if self.channels % self.scale:
            raise ParameterError(
                f"ClassifierConfig: channels {self.channels} not divisible by scale {self.scale}")
        if self.se_reduction < 1 or self.channels % self.se_reduction:
            raise ParameterError(
                f"ClassifierConfig: reduction {self.se_reduction} must divide channels {self.channels}")
        if len(self.dilations) != 3 or min(self.dilations) < 1:
            raise ParameterError(f"ClassifierConfig: need three positive dilations, got {self.dilations}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"ClassifierConfig: kernel size must be odd, got {self.kernel_size}")
        # the projection must reduce dimension, or the attention overfits freely
        if not 1 <= self.attn_dim < self.fused_channels:
            raise ParameterError(
                f"ClassifierConfig: attention dim {self.attn_dim} must sit below {self.fused_channels}")


class SubjectClassifier(Network):
    """Maps (B, C, T) windows to subject probabilities and (B, 2F) embeddings."""

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        C, k = cfg.channels, cfg.kernel_size
        width = C // cfg.scale
        hidden = C // cfg.se_reduction
        for n in range(3):
            for i in range(1, cfg.scale):
                self._register(f"cta.block.{n}.group.{i}.kernel", he_conv(rng, width, width, k))
                self._register(f"cta.block.{n}.group.{i}.bias", np.zeros(width))
            self._register(f"cta.block.{n}.mix.kernel", he_conv(rng, C, C, 1))
            self._register(f"cta.block.{n}.mix.bias", np.zeros(C))
            self._register(f"cta.block.{n}.se.0.weight", he_dense(rng, hidden, C))
            self._register(f"cta.block.{n}.se.0.bias", np.zeros(hidden))
            self._register(f"cta.block.{n}.se.1.weight", xavier_dense(rng, C, hidden))
            self._register(f"cta.block.{n}.se.1.bias", np.zeros(C))
        F = cfg.fused_channels
        self._register("cta.fuse.kernel", he_conv(rng, F, 3 * C, 1))
        self._register("cta.fuse.bias", np.zeros(F))
        self._register("cta.attn.proj.weight", xavier_dense(rng, cfg.attn_dim, F))
        self._register("cta.attn.proj.bias", np.zeros(cfg.attn_dim))
        self._register("cta.attn.score.weight", xavier_dense(rng, F, cfg.attn_dim))
        self._register("cta.attn.score.bias", np.zeros(F))
        self._register("cta.head.weight", xavier_dense(rng, cfg.n_subjects, 2 * F))
        self._register("cta.head.bias", np.zeros(cfg.n_subjects))

    def block(self, x: Tensor, n: int) -> Tensor:
        """One residual block: hierarchical group convs, 1x1 mix, channel gate.

        Group 0 passes through untouched; group i >= 1 is convolved after
        adding the previous group's output, so later groups see ever larger
        receptive fields.  The gate rescales channels from their temporal
        means, and the input rides a residual connection around everything.
        """
        cfg = self.cfg
        p = self._params
        width = cfg.channels // cfg.scale
        groups = [ad.narrow(x, 1, i * width, width) for i in range(cfg.scale)]
        prev = groups[0]
        cat = groups[0]
        for i in range(1, cfg.scale):
            h = ad.conv1d(ad.add(groups[i], prev),
                          p[f"cta.block.{n}.group.{i}.kernel"],
                          p[f"cta.block.{n}.group.{i}.bias"],
                          dilation=cfg.dilations[n])
            prev = ad.relu(h)
            cat = ad.concat(cat, prev, axis=1)
        mixed = ad.relu(ad.conv1d(cat, p[f"cta.block.{n}.mix.kernel"],
                                  p[f"cta.block.{n}.mix.bias"]))
        squeeze = ad.relu(ad.dense_affine(ad.mean_last(mixed),
                                          p[f"cta.block.{n}.se.0.weight"],
                                          p[f"cta.block.{n}.se.0.bias"]))
        gate = ad.sigmoid(ad.dense_affine(squeeze,
                                          p[f"cta.block.{n}.se.1.weight"],
                                          p[f"cta.block.{n}.se.1.bias"]))
        return ad.add(ad.scale_channels(mixed, gate), x)

    def frame_features(self, x: Tensor) -> Tensor:
        """Chain the three blocks and fuse their concatenated outputs to (B, F, T)."""
        if x.ndim != 3 or x.shape[1] != self.cfg.channels:
            raise DimensionError(
                f"classifier: need (B, {self.cfg.channels}, T) input, got {x.shape}")
        h1 = self.block(x, 0)
        h2 = self.block(h1, 1)
        h3 = self.block(h2, 2)
        cat = ad.concat(ad.concat(h1, h2, axis=1), h3, axis=1)
        return ad.conv1d(cat, self._params["cta.fuse.kernel"], self._params["cta.fuse.bias"])

    def attention(self, feats: Tensor) -> Tensor:
        """Per-channel frame weights: (B, F, T) -> (B, F, T), rows summing to 1."""
        p = self._params
        e = ad.swap_axes(feats, 1, 2)
        e = ad.dense_affine(e, p["cta.attn.proj.weight"], p["cta.attn.proj.bias"])
        e = ad.activation(e, self.cfg.attn_nonlinearity)
        e = ad.dense_affine(e, p["cta.attn.score.weight"], p["cta.attn.score.bias"])
        return ad.softmax_frames(ad.swap_axes(e, 1, 2))

    def pool(self, feats: Tensor) -> Tensor:
        """Attention-weighted mean and standard deviation: (B, F, T) -> (B, 2F).

        The weighted variance is clamped at zero before the square root, so
        a single frame (or a saturated attention row) yields deviation 0.
        """
        if feats.ndim != 3 or feats.shape[2] < 1:
            raise DimensionError(f"pool: need (B, F, T) with T >= 1, got {feats.shape}")
        alpha = self.attention(feats)
        mu = ad.sum_last(ad.mul(alpha, feats))
        var = ad.sub(ad.sum_last(ad.mul(alpha, ad.square(feats))), ad.square(mu))
        return ad.concat(mu, ad.sqrt_clamped(var), axis=1)

    def embedding(self, x: Tensor) -> Tensor:
        """Pooled statistics vector, taken before the classification head."""
        return self.pool(self.frame_features(x))

    def logits(self, x: Tensor) -> Tensor:
        return ad.dense_affine(self.embedding(x),
                               self._params["cta.head.weight"], self._params["cta.head.bias"])

    def classify(self, x: Tensor) -> Tensor:
        """Subject probabilities per window; each row sums to 1."""
        return ad.softmax_frames(self.logits(x))
