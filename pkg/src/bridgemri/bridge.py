"""Joint bridge training objective, trainer state, and ancestral sampler.

Two residual predictors are trained on clean/degraded image pairs: net1
works on bridge states anchored at the clean image with the degraded one
at the far end, net2 on the mirrored bridge.  Every step adds a nested
self-consistency pass — each net's clamped reconstruction becomes the
far endpoint of a freshly noised bridge handed to the opposite net, and
both are penalized for drift from the true endpoints.  One noise draw is
shared by all four bridge states in a step, so ablations that disable
the nested pass consume an identical random stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .contourlet import cdem_embed, contourlet_decompose
from .denoiser import (DenoiserConfig, cdem_param_names, denoiser_forward,
                       encoder_feature_shapes, init_params)
from .errors import ConfigError, NumericsError, ShapeError
from .optim import AdamW, AdamWConfig
from .rng import (RngState, derive_stream_seed, integers, standard_normal,
                  stream)
from .schedule import BridgeSchedule, make_schedule, reverse_step
from .tensor import Tensor, backward

# predictor: (state batch as a Tensor, per-sample step indices) -> residual
Predictor = Callable[[Tensor, np.ndarray], Tensor]

T_MODES = ("tied", "independent")
LOSS_NORMS = ("l1", "l2")


@dataclass(frozen=True)
class TrainingConfig:
    """Objective and optimization settings for one training run."""

    steps: int = 20
    lambda_selfcon: float = 1.0
    selfcon_enabled: bool = True
    t_mode: str = "tied"
    nested_noise_scale: float = 1.2
    loss_norm: str = "l1"
    learning_rate: float = 1e-4
    batch_size: int = 2
    iterations: int = 10000

    def validate(self) -> None:
        if self.steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}")
        if self.lambda_selfcon < 0:
            raise ConfigError(f"lambda_selfcon must be >= 0, got "
                              f"{self.lambda_selfcon}")
        if self.t_mode not in T_MODES:
            raise ConfigError(f"t_mode must be one of {T_MODES}, got "
                              f"{self.t_mode!r}")
        if self.nested_noise_scale <= 0:
            raise ConfigError(f"nested_noise_scale must be > 0, got "
                              f"{self.nested_noise_scale}")
        if self.loss_norm not in LOSS_NORMS:
            raise ConfigError(f"loss_norm must be one of {LOSS_NORMS}, got "
                              f"{self.loss_norm!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got "
                              f"{self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got "
                              f"{self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got "
                              f"{self.iterations}")


def _deviation(diff: Tensor, norm: str) -> Tensor:
    if norm == "l1":
        return T.mean_reduce(T.absolute(diff))
    return T.mean_reduce(T.square(diff))


def _state_dtype(arr: np.ndarray) -> np.dtype:
    if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        return arr.dtype
    return np.dtype(np.float32)


def _gather(table: np.ndarray, t: np.ndarray, dtype) -> np.ndarray:
    return table[t].astype(dtype).reshape(-1, 1, 1, 1)


def _check_steps(name: str, t: np.ndarray, steps: int) -> np.ndarray:
    t = np.asarray(t, dtype=int)
    if t.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D step batch, got shape {t.shape}")
    if np.any((t < 1) | (t > steps)):
        raise ValueError(f"{name} entries must lie in [1, {steps}]")
    return t


def bridge_losses(config: TrainingConfig, sched: BridgeSchedule,
                  predict1: Predictor, predict2: Predictor,
                  x0: np.ndarray, y0: np.ndarray,
                  t1: np.ndarray, t2: np.ndarray,
                  eps: np.ndarray) -> dict[str, Tensor]:
    """Per-step losses from explicit draws, as graph Tensors.

    x0, y0, eps are (B, 1, H, W); t1 and t2 are length-B step batches.
    Returns rec_x, rec_y, selfcon_x, selfcon_y, and their sum under
    "total"; the selfcon entries arrive already weighted by
    lambda_selfcon, so the components add up to the total exactly.
    Gradients reach both predictors through the nested pass: one via its
    inner residual, the other via the reconstruction used as the nested
    bridge endpoint.
    """
    if sched.steps != config.steps:
        raise ConfigError(f"schedule has {sched.steps} steps, config wants "
                          f"{config.steps}")
    x0 = np.asarray(x0)
    dtype = _state_dtype(x0)
    x0 = x0.astype(dtype, copy=False)
    y0 = np.asarray(y0, dtype=dtype)
    eps = np.asarray(eps, dtype=dtype)
    if x0.ndim != 4 or x0.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W) states, got {x0.shape}")
    if y0.shape != x0.shape or eps.shape != x0.shape:
        raise ShapeError(f"mismatched state shapes {x0.shape}, {y0.shape}, "
                         f"{eps.shape}")
    t1 = _check_steps("t1", t1, config.steps)
    t2 = _check_steps("t2", t2, config.steps)
    if t1.shape[0] != x0.shape[0] or t2.shape[0] != x0.shape[0]:
        raise ShapeError(f"step batches {t1.shape[0]}/{t2.shape[0]} do not "
                         f"match batch {x0.shape[0]}")

    m1 = _gather(sched.m, t1, dtype)
    s1 = np.sqrt(_gather(sched.sigma, t1, dtype))
    x_t1 = (1.0 - m1) * x0 + m1 * y0 + s1 * eps
    y_t1 = (1.0 - m1) * y0 + m1 * x0 + s1 * eps
    eh1 = predict1(Tensor(x_t1), t1)
    eh2 = predict2(Tensor(y_t1), t1)
    rec_x = _deviation(T.subtract(eh1, Tensor(m1 * (y0 - x0) + s1 * eps)),
                       config.loss_norm)
    rec_y = _deviation(T.subtract(eh2, Tensor(m1 * (x0 - y0) + s1 * eps)),
                       config.loss_norm)

    if config.selfcon_enabled and config.lambda_selfcon > 0:
        x0_bar = T.clamp01_ste(T.subtract(Tensor(x_t1), eh1))
        y0_bar = T.clamp01_ste(T.subtract(Tensor(y_t1), eh2))
        m2 = _gather(sched.m, t2, dtype)
        s2 = config.nested_noise_scale * np.sqrt(_gather(sched.sigma, t2, dtype))
        m2_t = Tensor(np.broadcast_to(m2, x0.shape).copy())
        x_t2 = T.add(Tensor((1.0 - m2) * x0 + s2 * eps), T.multiply(m2_t, y0_bar))
        y_t2 = T.add(Tensor((1.0 - m2) * y0 + s2 * eps), T.multiply(m2_t, x0_bar))
        # inner reconstructions stay unclamped: the penalty must see raw drift
        xin = T.subtract(x_t2, predict1(x_t2, t2))
        yin = T.subtract(y_t2, predict2(y_t2, t2))
        selfcon_x = T.scale(_deviation(T.subtract(Tensor(x0), xin),
                                       config.loss_norm), config.lambda_selfcon)
        selfcon_y = T.scale(_deviation(T.subtract(Tensor(y0), yin),
                                       config.loss_norm), config.lambda_selfcon)
        total = T.add(T.add(rec_x, rec_y), T.add(selfcon_x, selfcon_y))
    else:
        selfcon_x = Tensor(np.zeros((), dtype=dtype))
        selfcon_y = Tensor(np.zeros((), dtype=dtype))
        total = T.add(rec_x, rec_y)
    return {"rec_x": rec_x, "rec_y": rec_y, "selfcon_x": selfcon_x,
            "selfcon_y": selfcon_y, "total": total}


def make_predictor(net_config: DenoiserConfig,
                   params: dict[str, Tensor]) -> Predictor:
    """Close a parameter set into a residual-predicting callable.

    With directional embedding enabled, each call decomposes the incoming
    state (as plain array data, outside the graph) and feeds the
    per-level embeddings alongside it.
    """
    cdem_params = {n: params[n] for n in cdem_param_names(net_config)}

    def predict(x_t, t) -> Tensor:
        feats = None
        if net_config.cdem_enabled:
            data = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
            b, _, h, w = data.shape
            pyrs = [contourlet_decompose(data[i, 0], net_config.depth,
                                         net_config.cdem_j)
                    for i in range(b)]
            feats = cdem_embed(pyrs, encoder_feature_shapes(net_config, h, w),
                               cdem_params)
        return denoiser_forward(net_config, params, x_t, t, cdem_feats=feats)

    return predict


@dataclass
class TrainerState:
    """Everything a training run mutates: twin nets, optimizers, rng."""

    config: TrainingConfig
    net_config: DenoiserConfig
    schedule: BridgeSchedule
    params1: dict[str, Tensor]
    params2: dict[str, Tensor]
    opt1: AdamW
    opt2: AdamW
    rng: RngState
    step: int = 0

    def predictors(self) -> tuple[Predictor, Predictor]:
        return (make_predictor(self.net_config, self.params1),
                make_predictor(self.net_config, self.params2))


def make_trainer(seed: int, config: TrainingConfig,
                 net_config: DenoiserConfig) -> TrainerState:
    config.validate()
    net_config.validate()
    opt_cfg = AdamWConfig(lr=config.learning_rate)
    params1 = init_params(derive_stream_seed(seed, "init-theta1"), net_config)
    params2 = init_params(derive_stream_seed(seed, "init-theta2"), net_config)
    return TrainerState(config=config, net_config=net_config,
                        schedule=make_schedule(config.steps),
                        params1=params1, params2=params2,
                        opt1=AdamW(params1, opt_cfg),
                        opt2=AdamW(params2, opt_cfg),
                        rng=stream(seed, "train"))


def _as_batch(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"{name} must be (B, H, W) or (B, 1, H, W), got "
                         f"{arr.shape}")
    return arr


def train_step(state: TrainerState, x0: np.ndarray,
               y0: np.ndarray) -> dict[str, float]:
    """One optimizer update on a batch of clean/degraded pairs.

    Draw order per step is fixed — t1, then t2 only under the
    "independent" mode, then one shared noise field — so runs that differ
    only in the nested pass consume identical random streams.  Raises
    NumericsError before touching the parameters if the loss goes
    non-finite.
    """
    cfg = state.config
    x0b = _as_batch(x0, "x0")
    y0b = _as_batch(y0, "y0")
    if x0b.shape != y0b.shape:
        raise ShapeError(f"pair shapes differ: {x0b.shape} vs {y0b.shape}")
    b = x0b.shape[0]
    t1 = integers(state.rng, 1, cfg.steps, (b,))
    t2 = integers(state.rng, 1, cfg.steps, (b,)) if cfg.t_mode == "independent" else t1
    eps = standard_normal(state.rng, x0b.shape)
    predict1, predict2 = state.predictors()
    losses = bridge_losses(cfg, state.schedule, predict1, predict2,
                           x0b, y0b, t1, t2, eps)
    if not np.isfinite(losses["total"].data):
        raise NumericsError(f"non-finite training loss at step {state.step}")
    backward(losses["total"],
             leaves=list(state.params1.values()) + list(state.params2.values()))
    state.opt1.step({n: p.grad for n, p in state.params1.items()})
    state.opt2.step({n: p.grad for n, p in state.params2.items()})
    state.step += 1
    return {name: float(t.data) for name, t in losses.items()}


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    deterministic: bool = False


def sample(predictor: Predictor, sched: BridgeSchedule, y0: np.ndarray,
           sampler: SamplerConfig = SamplerConfig(),
           rng: RngState | None = None) -> np.ndarray:
    """Reverse the bridge from a degraded image to a reconstruction.

    y0 is one (H, W) image or a (B, H, W) batch; the result matches.  The
    chain starts at y0, re-estimates the clean image at every step
    (clamped to [0, 1]), and steps down with the posterior mean plus
    noise; deterministic mode suppresses the noise entirely, otherwise
    rng must supply it.
    """
    if sampler.steps != sched.steps:
        raise ConfigError(f"sampler wants {sampler.steps} steps but the "
                          f"schedule has {sched.steps}")
    if not sampler.deterministic and rng is None:
        raise ConfigError("stochastic sampling needs an rng state")
    arr = np.asarray(y0, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"y0 must be (H, W) or (B, H, W), got {arr.shape}")
    end = arr[:, None]
    x = end.copy()
    for t in range(sched.steps, 0, -1):
        eh = predictor(Tensor(x), np.full(x.shape[0], t))
        x0_hat = np.clip(x - eh.data, 0.0, 1.0)
        if t > 1 and not sampler.deterministic:
            noise = standard_normal(rng, x.shape)
        else:
            noise = np.zeros_like(x)
        x = reverse_step(sched, t, x, x0_hat, end, noise).astype(np.float32)
    out = x[:, 0]
    return out[0] if single else out
