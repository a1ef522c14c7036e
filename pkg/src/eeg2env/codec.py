"""Multi-scale convolutional codec: EEG windows in, one envelope out.

Five conv+pool encoder stages halve time and widen channels; the decoder
mirrors them with nearest-neighbour upsampling, refinement convolutions,
and skip concatenation at matching resolution.  Training minimizes
1 - Pearson r per window, so the objective is invariant to the scale and
offset of the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .network import Network, he_conv

_EPS = 1e-8  # variance floor inside the correlation denominator


@dataclass(frozen=True)
class CodecConfig:
    in_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 64, 128, 128, 256)
    kernel_sizes: tuple[int, ...] = (7, 3, 3, 3, 3)
    pool_factor: int = 2
    decoder_channels: tuple[int, ...] = (128, 128, 64, 64)
    decoder_kernels: tuple[int, ...] = (3, 3, 3, 3)
    head_kernel: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if len(self.stage_channels) != 5 or len(self.kernel_sizes) != 5:
            raise ParameterError("CodecConfig: exactly five encoder stages are supported")
        n_dec = len(self.stage_channels) - 1
        if len(self.decoder_channels) != n_dec or len(self.decoder_kernels) != n_dec:
            raise ParameterError(f"CodecConfig: decoder needs {n_dec} stages")
        if self.pool_factor < 2:
            raise ParameterError("CodecConfig: pool_factor must be >= 2")
        if self.in_channels < 1 or min(self.stage_channels) < 1 or min(self.decoder_channels) < 1:
            raise ParameterError("CodecConfig: channel counts must be positive")
        if min(self.kernel_sizes) < 1 or min(self.decoder_kernels) < 1 or self.head_kernel < 1:
            raise ParameterError("CodecConfig: kernel sizes must be positive")

    @property
    def total_pool(self) -> int:
        return self.pool_factor ** len(self.stage_channels)


class EnvelopeCodec(Network):
    """Encoder/decoder over (B, C, L) windows; reconstruct() yields (B, L)."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c_prev = cfg.in_channels
        for j, (c, k) in enumerate(zip(cfg.stage_channels, cfg.kernel_sizes)):
            self._register(f"enc.{j}.kernel", he_conv(rng, c, c_prev, k))
            self._register(f"enc.{j}.bias", np.zeros(c))
            c_prev = c
        skips = tuple(reversed(cfg.stage_channels[:-1]))  # stage 4, 3, 2, 1 widths
        c_prev = cfg.stage_channels[-1]
        for j, (c, k) in enumerate(zip(cfg.decoder_channels, cfg.decoder_kernels)):
            self._register(f"dec.{j}.kernel", he_conv(rng, c, c_prev, k))
            self._register(f"dec.{j}.bias", np.zeros(c))
            c_prev = c + skips[j]
        self._register("head.kernel", he_conv(rng, 1, c_prev, cfg.head_kernel))
        self._register("head.bias", np.zeros(1))

    def encode(self, x: Tensor) -> list[Tensor]:
        """All five bottlenecks, shallow to deep; stage j halves time j times."""
        if x.ndim != 3:
            raise DimensionError(f"encode: need (B, C, L), got {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"encode: expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] % self.cfg.total_pool:
            raise DimensionError(
                f"encode: window length {x.shape[2]} not divisible by {self.cfg.total_pool}")
        feats: list[Tensor] = []
        h = x
        for j in range(len(self.cfg.stage_channels)):
            h = ad.conv1d(h, self._params[f"enc.{j}.kernel"], self._params[f"enc.{j}.bias"],
                          padding="same")
            h = ad.activation(h, self.cfg.activation)
            h = ad.maxpool1d(h, self.cfg.pool_factor)
            feats.append(h)
        return feats

    def decode(self, feats: list[Tensor]) -> Tensor:
        """Upsample back to the input rate, mixing in skip features."""
        if len(feats) != len(self.cfg.stage_channels):
            raise DimensionError(f"decode: expected {len(self.cfg.stage_channels)} bottlenecks, "
                                 f"got {len(feats)}")
        h = feats[-1]
        for j in range(len(self.cfg.decoder_channels)):
            h = ad.upsample_nearest(h, self.cfg.pool_factor)
            h = ad.conv1d(h, self._params[f"dec.{j}.kernel"], self._params[f"dec.{j}.bias"],
                          padding="same")
            h = ad.activation(h, self.cfg.activation)
            skip = feats[len(feats) - 2 - j]  # encoder stage at this resolution
            if skip.shape[2] != h.shape[2]:
                raise DimensionError(
                    f"decode: skip extent {skip.shape[2]} != decoder extent {h.shape[2]}")
            h = ad.concat(h, skip, axis=1)
        h = ad.upsample_nearest(h, self.cfg.pool_factor)
        h = ad.conv1d(h, self._params["head.kernel"], self._params["head.bias"], padding="same")
        return ad.reshape(h, (h.shape[0], h.shape[2]))

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def pearson_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Batch mean of 1 - Pearson r, in [0, 2].

    A window with (near-)zero variance on either side contributes r = 0,
    i.e. loss 1, through a variance floor of 1e-8 inside each square root.
    """
    if pred.ndim != 2 or pred.shape != truth.shape:
        raise DimensionError(f"pearson_loss: need matching (B, L), got {pred.shape} and {truth.shape}")
    if pred.shape[1] < 2:
        raise DimensionError("pearson_loss: windows must hold at least 2 samples")
    pc = ad.center_last(pred)
    tc = ad.center_last(truth)
    cov = ad.sum_last(ad.mul(pc, tc))
    denom = ad.mul(ad.sqrt_clamped(ad.clamp_min(ad.sum_last(ad.square(pc)), _EPS)),
                   ad.sqrt_clamped(ad.clamp_min(ad.sum_last(ad.square(tc)), _EPS)))
    r = ad.div(cov, denom)
    return ad.add_scalar(ad.neg(ad.mean_all(r)), 1.0)
