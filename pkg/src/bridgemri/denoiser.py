"""Time-conditioned U-Net epsilon predictor.

A small encoder/decoder with average-pool downsampling, nearest-neighbor
upsampling, channel-concatenated skips, group normalization (4 groups)
and SiLU.  A sinusoidal step embedding feeds a two-layer MLP whose
output is projected and broadcast-added at every resolution.  The output
head is zero-initialized so an untrained network predicts exactly zero,
which makes the initial x0 estimate equal its input.  Optional CDEM
features (contourlet subband embeddings) are added to the encoder
features level by level.

Two independent instances of this network form the twin directions of
the bridge model; nothing here is shared between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import RngState, standard_normal
from .tensor import Tensor

GROUPS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 3
    time_dim: int = 64
    cdem_enabled: bool = True
    channel_mult: tuple[int, ...] = (1, 2, 2)
    cdem_j: tuple[int, ...] = (3, 3, 2)
    cdem_mid_channels: int = 16

    def validate(self) -> None:
        if self.base_channels < GROUPS or self.base_channels % GROUPS:
            raise ConfigError(f"base_channels must be a positive multiple of {GROUPS}, "
                              f"got {self.base_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.channel_mult) != self.depth:
            raise ConfigError(f"channel_mult needs {self.depth} entries, "
                              f"got {len(self.channel_mult)}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be even and >= 2, got {self.time_dim}")
        if self.cdem_enabled:
            if len(self.cdem_j) != self.depth:
                raise ConfigError(f"cdem_j needs {self.depth} entries to match the "
                                  f"encoder, got {len(self.cdem_j)}")
            if any(j < 1 for j in self.cdem_j):
                raise ConfigError(f"cdem_j entries must be >= 1, got {self.cdem_j}")
            if self.cdem_mid_channels < 1:
                raise ConfigError("cdem_mid_channels must be positive")

    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs of t at geometric frequencies 1..1e-4."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    k = dim // 2
    if k == 1:
        omega = np.ones(1)
    else:
        omega = 10000.0 ** (-np.arange(k, dtype=np.float64) / (k - 1))
    ang = float(t) * omega
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def encoder_feature_shapes(config: DenoiserConfig, height: int,
                           width: int) -> list[tuple[int, int, int]]:
    """(channels, H, W) of each encoder level for a given input size."""
    chans = config.channels()
    return [(chans[l], height >> l, width >> l) for l in range(config.depth)]


def _he(state: RngState, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    data = standard_normal(state, shape, dtype=dtype) * np.sqrt(2.0 / fan_in).astype(dtype)
    return Tensor(data, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def init_params(seed: int, config: DenoiserConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled Gaussian init; output head (and CDEM tail) start at zero."""
    config.validate()
    state = RngState(seed=seed)
    td = config.time_dim
    chans = config.channels()
    p: dict[str, Tensor] = {}

    p["time.w1"] = _he(state, (td, td), td, dtype)
    p["time.b1"] = _zeros((td,), dtype)
    p["time.w2"] = _he(state, (td, td), td, dtype)
    p["time.b2"] = _zeros((td,), dtype)

    def block(prefix: str, cin: int, cout: int) -> None:
        # convs are biasless: a group norm follows each one, and the time
        # shift enters after gn1 so it cannot be normalized away
        p[f"{prefix}.conv1.w"] = _he(state, (cout, cin, 3, 3), cin * 9, dtype)
        p[f"{prefix}.gn1.gamma"] = _ones((cout, 1, 1), dtype)
        p[f"{prefix}.gn1.beta"] = _zeros((cout, 1, 1), dtype)
        p[f"{prefix}.temb.w"] = _he(state, (td, cout), td, dtype)
        p[f"{prefix}.temb.b"] = _zeros((cout,), dtype)
        p[f"{prefix}.conv2.w"] = _he(state, (cout, cout, 3, 3), cout * 9, dtype)
        p[f"{prefix}.gn2.gamma"] = _ones((cout, 1, 1), dtype)
        p[f"{prefix}.gn2.beta"] = _zeros((cout, 1, 1), dtype)

    for l in range(config.depth):
        block(f"enc{l}", 1 if l == 0 else chans[l - 1], chans[l])
    for l in range(config.depth - 2, -1, -1):
        block(f"dec{l}", chans[l + 1] + chans[l], chans[l])

    p["head.w"] = _zeros((1, chans[0], 3, 3), dtype)
    p["head.b"] = _zeros((1, 1, 1), dtype)

    if config.cdem_enabled:
        mid = config.cdem_mid_channels
        for l in range(config.depth):
            cin = 1 << config.cdem_j[l]
            p[f"cdem{l}.conv1.w"] = _he(state, (mid, cin, 3, 3), cin * 9, dtype)
            p[f"cdem{l}.conv1.b"] = _zeros((mid, 1, 1), dtype)
            p[f"cdem{l}.conv2.w"] = _he(state, (mid, mid, 3, 3), mid * 9, dtype)
            p[f"cdem{l}.conv2.b"] = _zeros((mid, 1, 1), dtype)
            # zero tail: the embedding starts as an additive identity
            p[f"cdem{l}.conv3.w"] = _zeros((chans[l], mid, 3, 3), dtype)
            p[f"cdem{l}.conv3.b"] = _zeros((chans[l], 1, 1), dtype)
    return p


def cdem_param_names(config: DenoiserConfig) -> list[str]:
    names = []
    if config.cdem_enabled:
        for l in range(config.depth):
            for k in (1, 2, 3):
                names += [f"cdem{l}.conv{k}.w", f"cdem{l}.conv{k}.b"]
    return names


def _as_t_array(t, batch: int) -> np.ndarray:
    ts = np.atleast_1d(np.asarray(t))
    if ts.size == 1:
        ts = np.repeat(ts, batch)
    if ts.shape != (batch,):
        raise ShapeError(f"step batch shape {ts.shape} does not match batch {batch}")
    return ts


def denoiser_forward(config: DenoiserConfig, params: dict[str, Tensor], x_t,
                     t, cdem_feats: list[Tensor] | None = None) -> Tensor:
    """Predict the residual for a batch of bridge states.

    x_t: (B, 1, H, W) Tensor or array with H, W divisible by 2^(depth-1).
    t: one step index or a length-B sequence.  cdem_feats must be the
    per-level embeddings when config.cdem_enabled, and None otherwise.
    """
    dtype = params["head.w"].dtype
    x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t), dtype=dtype)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W), got {x.shape}")
    b, _, h, w = x.shape
    div = 1 << (config.depth - 1)
    if h % div or w % div:
        raise ShapeError(f"extents {h}x{w} not divisible by {div}")
    if config.cdem_enabled and cdem_feats is None:
        raise ConfigError("cdem_enabled config needs cdem_feats")
    if not config.cdem_enabled and cdem_feats is not None:
        raise ConfigError("cdem_feats passed but cdem is disabled")
    if cdem_feats is not None and len(cdem_feats) != config.depth:
        raise ConfigError(f"need {config.depth} cdem feature levels, "
                          f"got {len(cdem_feats)}")

    ts = _as_t_array(t, b)
    emb = np.stack([time_embedding(ti, config.time_dim) for ti in ts]).astype(dtype)
    hvec = T.silu(T.add(T.matmul(Tensor(emb, dtype=dtype), params["time.w1"]),
                        params["time.b1"]))
    hvec = T.add(T.matmul(hvec, params["time.w2"]), params["time.b2"])

    def block(prefix: str, z: Tensor, cout: int) -> Tensor:
        z = T.conv2d(z, params[f"{prefix}.conv1.w"])
        z = T.group_norm(z, params[f"{prefix}.gn1.gamma"],
                         params[f"{prefix}.gn1.beta"], groups=GROUPS)
        # time shift lands after the norm; a pre-norm shift would be
        # removed exactly when a group spans a single channel
        proj = T.add(T.matmul(hvec, params[f"{prefix}.temb.w"]), params[f"{prefix}.temb.b"])
        z = T.silu(T.add(z, T.reshape(proj, (b, cout, 1, 1))))
        z = T.conv2d(z, params[f"{prefix}.conv2.w"])
        z = T.silu(T.group_norm(z, params[f"{prefix}.gn2.gamma"],
                                params[f"{prefix}.gn2.beta"], groups=GROUPS))
        return z

    chans = config.channels()
    skips: list[Tensor] = []
    z = x
    for l in range(config.depth):
        z = block(f"enc{l}", z, chans[l])
        if cdem_feats is not None:
            z = T.add(z, cdem_feats[l])
        if l < config.depth - 1:
            skips.append(z)
            z = T.avg_pool2(z)
    for l in range(config.depth - 2, -1, -1):
        z = T.upsample_nearest2(z)
        z = T.concat_channels([z, skips[l]])
        z = block(f"dec{l}", z, chans[l])
    return T.add(T.conv2d(z, params["head.w"]), params["head.b"])
