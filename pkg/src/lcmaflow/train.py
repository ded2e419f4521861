"""Two-phase training: pretrain without factoring, derive a plan, train with the plan."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .flow import FlowModel, LogDetMap, build_flow, flow_forward, layout_size
from .plan import FactorizationPlan, boundary_maps
from .tensor import DomainError, Parameter, Tensor

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)

# rng stream tags, combined with the config seed
_INIT, _SHUFFLE, _NOISE, _VALID_NOISE, _REF_NOISE = range(5)
_PRETRAIN, _MAIN = 1, 2


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-5
    dequant_alpha: float = 0.05
    scales: int = 2
    couplings_per_scale: int = 2
    final_couplings: int = 2
    hidden: int = 64
    clamp: float = 4.0
    pretrain_fraction: float = 0.3
    reference_batch: int = 4096
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            cast = int if f.type == "int" else float
            setattr(self, f.name, cast(getattr(self, f.name)))
        positive = ["batch_size", "learning_rate", "adam_eps", "scales", "couplings_per_scale",
                    "hidden", "clamp", "reference_batch"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "weight_decay", "final_couplings", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.dequant_alpha < 0.5:
            raise ValueError("dequant_alpha must lie in (0, 0.5)")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if not 0.0 <= self.pretrain_fraction:
            raise ValueError("pretrain_fraction must be non-negative")

    @property
    def pretrain_epochs(self) -> int:
        return int(math.ceil(self.pretrain_fraction * self.epochs))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in types:
                raise ValueError(f"config line {lineno}: unknown setting {raw.strip()!r}")
            values[key] = int(val) if types[key] == "int" else float(val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


@dataclass
class RunMetrics:
    """Per-epoch bits/dim. ``seconds`` is wall-clock and excluded from equality."""

    rows: list[tuple[int, str, float]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list, compare=False)
    strategy: str | None = None
    plan_seed: int | None = None

    def add(self, epoch: int, split: str, bpd: float, seconds: float) -> None:
        self.rows.append((epoch, split, float(bpd)))
        self.seconds.append(float(seconds))

    def series(self, split: str) -> list[float]:
        return [b for _, s, b in self.rows if s == split]

    @property
    def final_valid_bpd(self) -> float:
        return self.series("valid")[-1]

    @property
    def wall_seconds(self) -> float:
        return self.seconds[-1] if self.seconds else 0.0

    def write_csv(self, path, timing: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "bits_per_dim", "seconds"])
            for (epoch, split, bpd), sec in zip(self.rows, self.seconds):
                w.writerow([epoch, split, repr(bpd), f"{sec:.3f}" if timing else ""])


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(x, alpha: float = 0.05, rng=None, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """Dequantize and logit-transform integer pixels.

    Returns ``(y, correction)`` where ``correction`` is the per-example log
    jacobian of the whole map ``x -> y``; adding it to a continuous
    log-likelihood of ``y`` gives the log-likelihood of the discrete data.
    Noise is uniform on ``[0, 1)`` from ``rng`` unless given explicitly.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x >= 256):
        raise ValueError("pixel values must lie in [0, 256)")
    if noise is None:
        noise = np.zeros_like(x) if rng is None else rng.random(x.shape)
    u = alpha + (1.0 - alpha) * (x + noise) / 256.0
    y = np.log(u) - np.log1p(-u)
    per = math.log(1.0 - alpha) - math.log(256.0) - np.log(u) - np.log1p(-u)
    corr = per.reshape(per.shape[0], -1).sum(axis=1) if per.ndim > 1 else per
    return y, corr


def postprocess(y, alpha: float = 0.05, noise=0.0) -> np.ndarray:
    u = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(y, dtype=np.float64)))
    return (u - alpha) * 256.0 / (1.0 - alpha) - noise


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.assign(p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))


def decayed_weights(model: FlowModel) -> list[Parameter]:
    return [p for p in model.parameters() if ".W" in p.id]


def training_loss(model: FlowModel, y: np.ndarray, weight_decay: float = 0.0) -> Tensor:
    """Mean negative log-likelihood per dimension (nats) plus an L2 penalty on weight matrices."""
    n = y.shape[0]
    nll = T.reduce_sum(model.log_prob_tensor(y)) * (-1.0 / (n * model.dim))
    if weight_decay:
        penalty = None
        for w in decayed_weights(model):
            term = T.reduce_sum(w * w)
            penalty = term if penalty is None else penalty + term
        if penalty is not None:
            nll = nll + penalty * weight_decay
    return nll


def _rng(config: TrainConfig, phase: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, phase, stream])


def _new_model(config: TrainConfig, layout, plan: FactorizationPlan | None, phase: int) -> FlowModel:
    return build_flow(tuple(layout), config.scales, plan=plan, couplings_per_scale=config.couplings_per_scale,
                      final_couplings=config.final_couplings, hidden=config.hidden, clamp=config.clamp,
                      rng=_rng(config, phase, _INIT))


def bits_per_dim(loglik, correction, dim: int) -> float:
    total = np.asarray(loglik, dtype=np.float64) + np.asarray(correction, dtype=np.float64)
    return float(-total.mean() / (dim * LN2))


def evaluate_bpd(model: FlowModel, images, alpha: float | None = 0.05, rng=None, batch_size: int = 1024) -> float:
    """Negative log-likelihood in bits/dim.

    With ``alpha`` set, ``images`` are integer pixels that get dequantized and
    logit-transformed (noise from ``rng``, seed 0 by default) and the result
    refers to the discrete data. With ``alpha=None`` the images are treated as
    continuous flow-space inputs.
    """
    x = np.asarray(images, dtype=np.float64)
    if alpha is None:
        y, corr = x, np.zeros(x.shape[0])
    else:
        y, corr = preprocess(x, alpha, np.random.default_rng(0) if rng is None else rng)
    ll = np.concatenate([flow_log_likelihood(model, y[i:i + batch_size]) for i in range(0, len(y), batch_size)])
    return bits_per_dim(ll, corr, model.dim)


def flow_log_likelihood(model: FlowModel, y) -> np.ndarray:
    return model.log_prob_tensor(y).data.copy()


def _fit(model: FlowModel, config: TrainConfig, dataset, epochs: int, phase: int,
         metrics: RunMetrics | None = None) -> RunMetrics:
    metrics = metrics if metrics is not None else RunMetrics()
    train = dataset.train
    valid = dataset.valid if len(dataset.valid) else dataset.train
    if len(train) == 0:
        raise ValueError("dataset has no training examples")
    d = model.dim
    shuffle = _rng(config, phase, _SHUFFLE)
    noise = _rng(config, phase, _NOISE)
    y_valid, c_valid = preprocess(valid, config.dequant_alpha, _rng(config, phase, _VALID_NOISE))
    opt = Adam(model.parameters(), config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    start = time.perf_counter()

    def valid_bpd():
        ll = np.concatenate([flow_log_likelihood(model, y_valid[i:i + 1024]) for i in range(0, len(y_valid), 1024)])
        return bits_per_dim(ll, c_valid, d)

    metrics.add(0, "valid", valid_bpd(), time.perf_counter() - start)
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(len(train))
        total_ll = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = train[order[lo:lo + config.batch_size]]
            y, corr = preprocess(batch, config.dequant_alpha, noise)
            try:
                loss = training_loss(model, y, config.weight_decay)
                T.backward(loss)
            except DomainError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch {lo // config.batch_size}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            nll = loss.item() - _penalty_value(model, config.weight_decay)
            opt.step()
            total_ll += -nll * len(batch) * d + corr.sum()
        train_bpd = -total_ll / (len(train) * d * LN2)
        metrics.add(epoch, "train", train_bpd, time.perf_counter() - start)
        vb = valid_bpd()
        if not np.isfinite(vb):
            raise DivergenceError(f"non-finite validation bits/dim at epoch {epoch}")
        metrics.add(epoch, "valid", vb, time.perf_counter() - start)
        logger.info("phase %d epoch %d train %.4f valid %.4f bits/dim", phase, epoch, train_bpd, vb)
    return metrics


def _penalty_value(model: FlowModel, weight_decay: float) -> float:
    if not weight_decay:
        return 0.0
    return weight_decay * sum(float((w.data ** 2).sum()) for w in decayed_weights(model))


def reference_batch(config: TrainConfig, dataset, phase: int = _PRETRAIN) -> np.ndarray:
    x = dataset.train[: config.reference_batch]
    y, _ = preprocess(x, config.dequant_alpha, _rng(config, phase, _REF_NOISE))
    return y


def pretrain(config: TrainConfig, dataset) -> tuple[FlowModel, list[LogDetMap]]:
    """Train a same-depth flow that keeps every dim, then average its boundary log-det maps."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = _new_model(config, dataset.layout, None, _PRETRAIN)
    _fit(model, config, dataset, config.pretrain_epochs, _PRETRAIN)
    maps = boundary_maps(model, reference_batch(config, dataset))
    return model, maps


def train_with_plan(config: TrainConfig, dataset, plan: FactorizationPlan) -> tuple[FlowModel, RunMetrics]:
    """Train a fresh multi-scale model whose factor layers follow ``plan``."""
    if tuple(plan.input_layout) != tuple(dataset.layout):
        raise ValueError(f"plan layout {plan.input_layout} does not match data layout {dataset.layout}")
    if plan.scales != config.scales:
        raise ValueError(f"plan has {plan.scales} scales but config asks for {config.scales}")
    model = _new_model(config, dataset.layout, plan, _MAIN)
    metrics = RunMetrics(strategy=plan.strategy, plan_seed=plan.seed)
    _fit(model, config, dataset, config.epochs, _MAIN, metrics)
    return model, metrics


# ---------------------------------------------------------------------------
# sampling and interpolation


def sample(model: FlowModel, n: int, rng, alpha: float | None = 0.05) -> np.ndarray:
    """Draw ``n`` samples at temperature 1.

    With ``alpha`` set the result is mapped back to pixel space and clamped to
    ``[0, 256)``; with ``alpha=None`` the raw flow-space samples are returned.
    """
    z = [rng.standard_normal((n,) + lay) for lay in model.z_layouts()]
    y = model.inverse(z)
    if alpha is None:
        return y
    return np.clip(postprocess(y, alpha), 0.0, np.nextafter(256.0, 0.0))


def encode(model: FlowModel, x, alpha: float | None = 0.05) -> list[np.ndarray]:
    y = np.asarray(x, dtype=np.float64) if alpha is None else preprocess(x, alpha)[0]
    return flow_forward(model, y).z_parts


def decode(model: FlowModel, z_parts, alpha: float | None = 0.05) -> np.ndarray:
    y = model.inverse(z_parts)
    return y if alpha is None else postprocess(y, alpha)


def interpolate(model: FlowModel, x_a, x_b, steps: int, alpha: float | None = 0.05) -> list[np.ndarray]:
    """Decode ``steps`` evenly spaced points on the latent segment between two inputs.

    Inputs are pixel images (no dequantization noise) unless ``alpha`` is
    ``None``. Frames are returned unclamped.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    za = encode(model, np.asarray(x_a, dtype=np.float64)[None], alpha)
    zb = encode(model, np.asarray(x_b, dtype=np.float64)[None], alpha)
    frames = []
    for lam in np.linspace(0.0, 1.0, steps):
        z = [(1.0 - lam) * a + lam * b for a, b in zip(za, zb)]
        frames.append(decode(model, z, alpha)[0])
    return frames
