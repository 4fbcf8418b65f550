"""Flow-matching pretraining and guided generation.

Training follows the in-context recipe: every step draws a batch of
experiment bundles, a logit-normal time, standard-normal base noise, and
minimizes the mean squared difference between the predicted velocity at the
interpolated state and the straight-line target velocity.  The condition is
dropped to a learnable null token with fixed probability so classifier-free
guidance is defined at sampling time.  AdamW with a warmup-stable-decay
schedule updates the weights; an exponential moving average of the weights
is what inference uses.

Generation integrates dY/dtau = v_u + omega * (v_c - v_u) from tau=0
(standard normal) to tau=1 with the adaptive Dormand-Prince solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import InvalidArgumentError, NumericalFailureError
from .model import ExperimentBundle, ModelConfig, NoisedQuery, build_model, forward
from .ode import integrate_dopri5


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    peak_lr: float = 1e-4
    warmup_frac: float = 0.01
    decay_frac: float = 0.20
    ema_decay: float = 0.999
    batch_size: int = 8  # bundles per step
    condition_drop_prob: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.warmup_frac < 1.0 and 0.0 < self.decay_frac < 1.0):
            raise InvalidArgumentError("warmup_frac and decay_frac must lie in (0, 1)")
        if self.total_steps < 1:
            raise InvalidArgumentError("total_steps must be >= 1")


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 2.0
    rtol: float = 1e-4
    atol: float = 1e-5
    max_ode_steps: int = 2000


@dataclass
class TrainResult:
    params: ParameterSet
    ema_params: ParameterSet
    trace: list[tuple[int, float, float]]  # (step, batch loss, lr)


def sample_time(rng: np.random.Generator) -> float:
    """tau = logistic(z), z ~ N(0, 1); the median sits at 0.5."""
    z = rng.standard_normal()
    return 1.0 / (1.0 + math.exp(-z))


def wsd_lr(step: int, cfg: TrainConfig) -> float:
    """Warmup-stable-decay schedule.

    Linear ramp to the peak over the first warmup_frac of the steps, flat
    until the final decay_frac, then a square-root decay to zero.
    """
    total = cfg.total_steps
    warmup = max(1, round(cfg.warmup_frac * total))
    decay_start = total - round(cfg.decay_frac * total)
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    if step <= decay_start:
        return cfg.peak_lr
    return cfg.peak_lr * math.sqrt((total - step) / (total - decay_start))


def cfm_loss(
    params: ParameterSet,
    model_cfg: ModelConfig,
    bundle: ExperimentBundle,
    tau: float,
    y0: np.ndarray,
    drop_condition: bool = False,
) -> Tensor:
    """Mean squared velocity error at the interpolated state.

    The state is (1 - tau) * Y0 + tau * target and the regression target is
    target - Y0; the mean runs over all M * d entries.
    """
    if bundle.target is None:
        raise InvalidArgumentError("cfm_loss needs a bundle with a target batch")
    target = np.asarray(bundle.target)
    y0 = np.asarray(y0)
    if y0.shape != target.shape:
        raise InvalidArgumentError(f"noise shape {y0.shape} != target shape {target.shape}")
    dtype = params["out.w"].dtype
    y_tau = ((1.0 - tau) * y0 + tau * target).astype(dtype)
    v = forward(params, model_cfg, NoisedQuery(y_tau, tau), bundle, drop_condition)
    diff = v - Tensor((target - y0).astype(dtype))
    return (diff * diff).mean()


class AdamW:
    """Decoupled weight decay Adam over a ParameterSet."""

    def __init__(self, params: ParameterSet, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.adam_beta1**self.t
        bias2 = 1.0 - c.adam_beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + c.adam_eps)
            p.data = p.data - lr * (update + c.weight_decay * p.data)


def ema_update(ema: dict[str, np.ndarray], params: ParameterSet, decay: float) -> None:
    """In place: ema <- decay * ema + (1 - decay) * theta."""
    for name, p in params.items():
        ema[name] *= decay
        ema[name] += (1.0 - decay) * p.data


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    bundle_stream: Iterator[ExperimentBundle],
    params: Optional[ParameterSet] = None,
) -> TrainResult:
    """Run the pretraining loop; deterministic given configs and stream.

    Every step consumes batch_size bundles, accumulates velocity-matching
    gradients (each bundle independently noised and possibly condition
    dropped), applies one AdamW update at the scheduled learning rate, and
    advances the weight EMA.  Aborts on a non-finite loss.
    """
    if params is None:
        params = build_model(model_cfg, train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = AdamW(params, train_cfg)
    ema = {name: p.data.copy() for name, p in params.items()}
    trace: list[tuple[int, float, float]] = []

    for step in range(1, train_cfg.total_steps + 1):
        params.zero_grads()
        batch_loss = 0.0
        for _ in range(train_cfg.batch_size):
            bundle = next(bundle_stream)
            tau = sample_time(rng)
            y0 = rng.standard_normal(bundle.target.shape)
            drop = rng.random() < train_cfg.condition_drop_prob
            loss = cfm_loss(params, model_cfg, bundle, tau, y0, drop)
            loss.backward(seed=np.asarray(1.0 / train_cfg.batch_size, dtype=loss.dtype))
            batch_loss += float(loss.data)
        batch_loss /= train_cfg.batch_size
        if not math.isfinite(batch_loss):
            raise NumericalFailureError(f"non-finite loss at step {step}")
        lr = wsd_lr(step, train_cfg)
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
        optimizer.step(grads, lr)
        ema_update(ema, params, train_cfg.ema_decay)
        trace.append((step, batch_loss, lr))

    ema_params = params.copy()
    ema_params.load_values(ema)
    return TrainResult(params=params, ema_params=ema_params, trace=trace)


def guided_field(
    params: ParameterSet,
    model_cfg: ModelConfig,
    bundle: ExperimentBundle,
    omega: float,
) -> Callable[[float, np.ndarray], np.ndarray]:
    """v_u + omega * (v_c - v_u); at omega = 1 only the conditional path runs."""

    def field(tau: float, y: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            noised = NoisedQuery(y_tau=y, tau=float(tau))
            v_cond = forward(params, model_cfg, noised, bundle).data
            if omega == 1.0:
                return v_cond
            v_uncond = forward(params, model_cfg, noised, bundle, drop_condition=True).data
            return v_uncond + omega * (v_cond - v_uncond)

    return field


def generate(
    params: ParameterSet,
    model_cfg: ModelConfig,
    bundle: ExperimentBundle,
    guidance: GuidanceConfig,
    m: int,
    seed: int,
) -> np.ndarray:
    """Sample M predicted post-perturbation cells by integrating the flow."""
    if m < 1:
        raise InvalidArgumentError("m must be >= 1")
    rng = np.random.default_rng(seed)
    y0 = rng.standard_normal((m, model_cfg.max_genes))
    field = guided_field(params, model_cfg, bundle, guidance.omega)
    result = integrate_dopri5(
        field, y0, 0.0, 1.0, rtol=guidance.rtol, atol=guidance.atol, max_steps=guidance.max_ode_steps
    )
    return result.y
